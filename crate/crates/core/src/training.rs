//! Loss, gradients, Rmsprop, the training loop and gradient checking.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention_decoder::{decoder_backward, decoder_forward, greedy_decode};
use crate::corpus::token_accuracy;
use crate::error::{Error, Result};
use crate::lattice::{build_lattice, CharSeq, Tokenization, WordLattice};
use crate::lattice_encoder::{encode_prepared, encode_with_tape, encoder_backward, EncoderInput};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{central_difference_grad, dot, global_norm, global_norm_clip, DEFAULT_FD_STEP};
use crate::params::Parameters;
use crate::recurrent_cells::{cell_backward, cell_forward, CellKind, ComposeMode, LatticeCellParams, StepGrads, StepInputs};
use crate::vocab::{build_vocab, Vocab, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub embed_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub clip: f64,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub rmsprop_momentum: f64,
    pub max_src_chars: usize,
    pub max_tgt_words: usize,
    pub patience_epochs: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            embed_dim: 320,
            hidden: 512,
            lr: 5e-4,
            batch: 80,
            clip: 1.0,
            rmsprop_rho: 0.99,
            rmsprop_eps: 1e-4,
            rmsprop_momentum: 0.0,
            max_src_chars: 70,
            max_tgt_words: 50,
            patience_epochs: 5,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim as f64),
            ("hidden", self.hidden as f64),
            ("batch", self.batch as f64),
            ("clip", self.clip),
            ("rmsprop_eps", self.rmsprop_eps),
            ("max_src_chars", self.max_src_chars as f64),
            ("max_tgt_words", self.max_tgt_words as f64),
            ("patience_epochs", self.patience_epochs as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !(self.rmsprop_rho > 0.0 && self.rmsprop_rho < 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1), got {}", self.rmsprop_rho)));
        }
        if self.rmsprop_momentum != 0.0 {
            return Err(Error::Config("only momentum 0 is supported".into()));
        }
        Ok(())
    }

    /// `key=value` pairs, used for checkpoint headers.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("batch", self.batch.to_string()),
            ("clip", self.clip.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden", self.hidden.to_string()),
            ("lr", self.lr.to_string()),
            ("max_src_chars", self.max_src_chars.to_string()),
            ("max_tgt_words", self.max_tgt_words.to_string()),
            ("patience_epochs", self.patience_epochs.to_string()),
            ("rmsprop_eps", self.rmsprop_eps.to_string()),
            ("rmsprop_momentum", self.rmsprop_momentum.to_string()),
            ("rmsprop_rho", self.rmsprop_rho.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// One training pair: prepared source lattice and target ids ending with EOS.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: EncoderInput,
    pub target: Vec<usize>,
}

impl Example {
    pub fn new(lat: &WordLattice, target: Vec<usize>, src_vocab: &Vocab) -> Result<Self> {
        Ok(Example {
            input: EncoderInput::new(lat, src_vocab)?,
            target,
        })
    }

    /// Reference tokens without the closing EOS.
    pub fn reference(&self) -> &[usize] {
        match self.target.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.target,
        }
    }
}

fn check_target(target: &[usize]) -> Result<()> {
    match target.last() {
        None => Err(Error::EmptyInput("target sequence")),
        Some(&EOS) => Ok(()),
        Some(_) => Err(Error::Config("target sequence must end with EOS".into())),
    }
}

/// Teacher-forced cross-entropy of one prepared example with exact gradients.
pub fn example_loss(model: &ModelParams, input: &EncoderInput, target: &[usize]) -> Result<(f64, ModelParams)> {
    check_target(target)?;
    let (ann, etape) = encode_with_tape(input, &model.src_embed.table, &model.enc)?;
    let (loss, dtape) = decoder_forward(&ann, &model.dec, target)?;
    let mut grads = model.clone();
    grads.zero();
    let dann = decoder_backward(&dtape, &ann, &model.dec, &mut grads.dec);
    encoder_backward(input, &etape, &model.enc, &dann, &mut grads.enc, &mut grads.src_embed.table)?;
    Ok((loss, grads))
}

/// `−Σ_j log p(y_j | y_<j, x)` under teacher forcing, with gradients for every tensor.
pub fn sequence_loss(
    lat: &WordLattice,
    target: &[usize],
    model: &ModelParams,
    src_vocab: &Vocab,
) -> Result<(f64, ModelParams)> {
    let input = EncoderInput::new(lat, src_vocab)?;
    example_loss(model, &input, target)
}

fn loss_only(model: &ModelParams, input: &EncoderInput, target: &[usize]) -> Result<f64> {
    let ann = encode_prepared(input, &model.src_embed, &model.enc)?;
    Ok(decoder_forward(&ann, &model.dec, target)?.0)
}

/// `dst += a * src`, tensor by tensor.
pub fn accumulate<P: Parameters>(dst: &mut P, src: &P, a: f64) {
    let src = src.named();
    for ((_, d), (_, s)) in dst.named_mut().into_iter().zip(src) {
        for (x, y) in d.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *x += a * y;
        }
    }
}

/// Mean loss and mean gradient over a batch. Sentences run in parallel; the
/// reduction happens in batch order, so the result does not depend on scheduling.
pub fn batch_gradient(model: &ModelParams, batch: &[&Example]) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let parts: Vec<Result<(f64, ModelParams)>> = batch
        .par_iter()
        .map(|ex| example_loss(model, &ex.input, &ex.target))
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads = model.clone();
    grads.zero();
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        accumulate(&mut grads, &g, 1.0);
    }
    for (_, m) in grads.named_mut() {
        m.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, grads))
}

/// Rescales all gradients jointly to global norm `max_norm`; returns the
/// norm before and after.
pub fn clip_gradients<P: Parameters>(grads: &mut P, max_norm: f64) -> (f64, f64) {
    let mut slices: Vec<&mut [f64]> = grads.named_mut().into_iter().map(|(_, m)| m.as_mut_slice()).collect();
    let before = global_norm_clip(&mut slices, max_norm);
    let after = global_norm(slices.iter().map(|s| &**s));
    (before, after)
}

/// First and second moment accumulators, one per tensor in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct RmspropState {
    pub names: Vec<String>,
    pub n: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub step: u64,
}

impl RmspropState {
    pub fn new<P: Parameters>(p: &P) -> Self {
        let named = p.named();
        RmspropState {
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            n: named.iter().map(|(_, m)| vec![0.0; m.as_slice().len()]).collect(),
            m: named.iter().map(|(_, m)| vec![0.0; m.as_slice().len()]).collect(),
            step: 0,
        }
    }
}

/// One Rmsprop step:
/// `n ← ρn + (1−ρ)g²`, `m ← ρm + (1−ρ)g`, `θ ← θ − lr·g / sqrt(n − m² + ε)`.
pub fn rmsprop_update<P: Parameters>(params: &mut P, grads: &P, st: &mut RmspropState, hp: &Hyperparams) -> Result<()> {
    let grads = grads.named();
    let params = params.named_mut();
    if params.len() != grads.len() || params.len() != st.names.len() {
        return Err(Error::Shape {
            name: "<store>".into(),
            reason: format!(
                "{} parameters, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                st.names.len()
            ),
        });
    }
    for (i, ((name, p), (gname, g))) in params.iter().zip(&grads).enumerate() {
        if *name != *gname || *name != st.names[i] || p.shape() != g.shape() || st.n[i].len() != p.as_slice().len() {
            return Err(Error::Shape {
                name: name.clone(),
                reason: "parameters, gradients and optimizer state disagree".into(),
            });
        }
    }
    let rho = hp.rmsprop_rho;
    for (i, ((_, p), (_, g))) in params.into_iter().zip(grads).enumerate() {
        let (n, m) = (&mut st.n[i], &mut st.m[i]);
        for (j, (theta, g)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            n[j] = rho * n[j] + (1.0 - rho) * g * g;
            m[j] = rho * m[j] + (1.0 - rho) * g;
            *theta += -hp.lr * g / (n[j] - m[j] * m[j] + hp.rmsprop_eps).sqrt();
        }
    }
    st.step += 1;
    Ok(())
}

/// Greedy decoding of every example, scored by token accuracy against its reference.
pub fn validation_accuracy(model: &ModelParams, data: &[Example], max_len: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyCorpus("validation set is empty".into()));
    }
    let hyps: Vec<Result<Vec<usize>>> = data
        .par_iter()
        .map(|ex| {
            let ann = encode_prepared(&ex.input, &model.src_embed, &model.enc)?;
            greedy_decode(&ann, &model.dec, max_len)
        })
        .collect();
    let hyps = hyps.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[usize]> = data.iter().map(Example::reference).collect();
    Ok(token_accuracy(&hyps, &refs))
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub hp: Hyperparams,
    pub seed: u64,
    pub max_epochs: usize,
    pub max_updates: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
    pub updates: usize,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters at the epoch with the best validation accuracy.
    pub best: ModelParams,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    /// Parameters and optimizer state when training stopped.
    pub last: ModelParams,
    pub optimizer: RmspropState,
    pub epochs: Vec<EpochRecord>,
    pub log: Vec<String>,
    /// Global gradient norm before and after clipping, per update.
    pub clip_norms: Vec<(f64, f64)>,
    pub updates: usize,
}

pub fn format_log_line(r: &EpochRecord) -> String {
    format!("epoch {} loss {:.6} val_acc {:.6}", r.epoch, r.loss, r.val_acc)
}

/// Minibatch training with early stopping on validation token accuracy.
/// `on_epoch` receives each log line as it is produced.
pub fn train(
    init: ModelParams,
    train_set: &[Example],
    valid_set: &[Example],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&str),
) -> Result<TrainReport> {
    opts.hp.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyCorpus("training set is empty".into()));
    }
    if valid_set.is_empty() {
        return Err(Error::EmptyCorpus("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let mut model = init;
    let mut opt = RmspropState::new(&model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        best: model.clone(),
        best_val_acc: f64::NEG_INFINITY,
        best_epoch: 0,
        last: model.clone(),
        optimizer: opt.clone(),
        epochs: Vec::new(),
        log: Vec::new(),
        clip_norms: Vec::new(),
        updates: 0,
    };
    let mut stale = 0;
    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut capped = false;
        for chunk in order.chunks(opts.hp.batch) {
            if opts.max_updates.is_some_and(|m| report.updates >= m) {
                capped = true;
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = batch_gradient(&model, &batch)?;
            report.clip_norms.push(clip_gradients(&mut grads, opts.hp.clip));
            rmsprop_update(&mut model, &grads, &mut opt, &opts.hp)?;
            report.updates += 1;
            loss_sum += loss;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let val_acc = validation_accuracy(&model, valid_set, opts.hp.max_tgt_words)?;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            val_acc,
            updates: report.updates,
        };
        let line = format_log_line(&rec);
        on_epoch(&line);
        report.log.push(line);
        report.epochs.push(rec);
        if val_acc > report.best_val_acc {
            report.best_val_acc = val_acc;
            report.best_epoch = epoch;
            report.best = model.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= opts.hp.patience_epochs
            || capped
            || opts.max_updates.is_some_and(|m| report.updates >= m)
        {
            break;
        }
    }
    report.last = model;
    report.optimizer = opt;
    Ok(report)
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Analytic and central-difference gradients over one flattened parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    pub fn max_relative_error(&self) -> f64 {
        self.worst().map_or(0.0, |(_, e)| e)
    }

    /// Index and relative error of the worst entry.
    pub fn worst(&self) -> Option<(usize, f64)> {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| relative_error(*a, *n))
            .enumerate()
            .fold(None, |best, (i, e)| match best {
                Some((_, b)) if b >= e => best,
                _ => Some((i, e)),
            })
    }

    pub fn max_abs_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
    }

    fn slice(&self, range: std::ops::Range<usize>) -> GradComparison {
        GradComparison {
            analytic: self.analytic[range.clone()].to_vec(),
            numeric: self.numeric[range].to_vec(),
        }
    }
}

/// Per-tensor comparison, in tensor name order.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorGradCheck {
    pub name: String,
    pub cmp: GradComparison,
}

fn per_tensor<P: Parameters>(p: &P, cmp: &GradComparison) -> Vec<TensorGradCheck> {
    let mut offset = 0;
    p.named()
        .into_iter()
        .map(|(name, m)| {
            let n = m.as_slice().len();
            let t = TensorGradCheck {
                name,
                cmp: cmp.slice(offset..offset + n),
            };
            offset += n;
            t
        })
        .collect()
}

fn fill_uniform<P: Parameters>(p: &mut P, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, m) in p.named_mut() {
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-scale..=scale);
        }
    }
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Compares [`cell_backward`] against central differences over every
/// parameter, input and predecessor-state entry of one random step with K
/// incoming edges, for the scalar `⟨c, h_t⟩` with random `c`. Parameters,
/// inputs, states and `c` are uniform in `[-1, 1]`. Returns the largest
/// relative error.
pub fn grad_check(kind: CellKind, mode: ComposeMode, dim: usize, k: usize, seed: u64) -> Result<f64> {
    Ok(grad_check_compare(kind, mode, dim, k, seed, |_, _| {})?.max_relative_error())
}

/// [`grad_check`] with the full comparison and a hook that may alter the
/// analytic gradients before they are compared. Entries are ordered as the
/// parameters (name order), then the K inputs, then the K predecessor states.
pub fn grad_check_compare(
    kind: CellKind,
    mode: ComposeMode,
    dim: usize,
    k: usize,
    seed: u64,
    hook: impl FnOnce(&mut StepGrads, &mut LatticeCellParams),
) -> Result<GradComparison> {
    if dim == 0 || dim > 8 || k == 0 {
        return Err(Error::Config(format!(
            "grad-check needs 1 <= dim <= 8 and K >= 1, got dim {dim}, K {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = LatticeCellParams::zeros(kind, mode, dim, dim);
    fill_uniform(&mut params, &mut rng, 1.0);
    let xs: Vec<Vec<f64>> = (0..k).map(|_| uniform_vec(&mut rng, dim)).collect();
    let hs: Vec<Vec<f64>> = (0..k).map(|_| uniform_vec(&mut rng, dim)).collect();
    let c = uniform_vec(&mut rng, dim);

    let n_params = params.num_params();
    let mut theta = params.flatten();
    for v in xs.iter().chain(&hs) {
        theta.extend_from_slice(v);
    }

    let objective = |t: &[f64]| -> Result<f64> {
        let mut p = params.clone();
        p.unflatten(&t[..n_params]);
        let vecs: Vec<&[f64]> = t[n_params..].chunks(dim).collect();
        let inputs = StepInputs::new((0..k).map(|i| (vecs[i], vecs[k + i])).collect());
        let (h, _) = cell_forward(kind, mode, &inputs, &p)?;
        Ok(dot(&c, &h))
    };

    let inputs = StepInputs::new(xs.iter().zip(&hs).map(|(x, h)| (x.as_slice(), h.as_slice())).collect());
    let (_, cache) = cell_forward(kind, mode, &inputs, &params)?;
    let mut grads = params.clone();
    grads.zero();
    let mut step = cell_backward(kind, Some(&cache), &params, &c, &mut grads)?;
    hook(&mut step, &mut grads);

    let mut analytic = grads.flatten();
    for v in step.dx.iter().chain(&step.dh_pre) {
        analytic.extend_from_slice(v);
    }
    let numeric = central_difference_grad(objective, &theta, DEFAULT_FD_STEP)?;
    Ok(GradComparison { analytic, numeric })
}

/// The four-character check instance: a chain for the plain GRU, otherwise
/// three merged tokenizations (`ab cd`, `a bcd`, `abc d`) so that `v_4` has
/// three incoming edges. `bcd` is left out of the vocabulary to exercise UNK.
fn check_instance(kind: CellKind, mode: ComposeMode, seed: u64) -> Result<(ModelParams, EncoderInput)> {
    let chars = CharSeq::new("abcd")?;
    let toks: Vec<Tokenization> = match kind {
        CellKind::Gru => vec![Tokenization::new(["ab", "c", "d"])],
        _ => vec![
            Tokenization::new(["ab", "cd"]),
            Tokenization::new(["a", "bcd"]),
            Tokenization::new(["abc", "d"]),
        ],
    };
    let lat = build_lattice(&chars, &toks)?;
    let src_vocab = build_vocab(["ab", "cd", "a", "abc", "d", "c"], 9)?;
    let config = ModelConfig {
        src_vocab: src_vocab.len(),
        tgt_vocab: 6,
        embed_dim: 4,
        hidden: 4,
        cell: kind,
        compose: mode,
    };
    let mut model = ModelParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fill_uniform(&mut model, &mut rng, 1.0);
    Ok((model, EncoderInput::new(&lat, &src_vocab)?))
}

/// Encoder-only check: the scalar `Σ_i ⟨c_i, h_i⟩` over all annotations with
/// random `c`, differentiated with respect to the source embeddings and every
/// encoder tensor.
pub fn encoder_grad_check(kind: CellKind, mode: ComposeMode, seed: u64) -> Result<Vec<TensorGradCheck>> {
    let (model, input) = check_instance(kind, mode, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = input.len();
    let width = 2 * model.enc.hidden_dim();
    let c: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(&mut rng, width)).collect();

    let (_, tape) = encode_with_tape(&input, &model.src_embed.table, &model.enc)?;
    let mut grads = model.clone();
    grads.zero();
    encoder_backward(&input, &tape, &model.enc, &c, &mut grads.enc, &mut grads.src_embed.table)?;
    // Decoder tensors do not enter this objective; both sides are exactly zero there.
    let analytic = grads.flatten();
    let objective = |t: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.unflatten(t);
        let ann = encode_prepared(&input, &m.src_embed, &m.enc)?;
        Ok(ann.h.iter().zip(&c).map(|(h, c)| dot(h, c)).sum())
    };
    let numeric = central_difference_grad(objective, &model.flatten(), DEFAULT_FD_STEP)?;
    let checks = per_tensor(&model, &GradComparison { analytic, numeric });
    Ok(checks.into_iter().filter(|t| !t.name.starts_with("dec.")).collect())
}

/// End-to-end check of [`sequence_loss`] for a three-token target over every
/// model tensor (`d = e = 4`, all entries uniform in `[-1, 1]`).
pub fn sequence_grad_check(kind: CellKind, mode: ComposeMode, seed: u64) -> Result<Vec<TensorGradCheck>> {
    let (model, input) = check_instance(kind, mode, seed)?;
    let target = [3, 5, EOS];
    let (_, grads) = example_loss(&model, &input, &target)?;
    let analytic = grads.flatten();
    let objective = |t: &[f64]| -> Result<f64> {
        let mut m = model.clone();
        m.unflatten(t);
        loss_only(&m, &input, &target)
    };
    let numeric = central_difference_grad(objective, &model.flatten(), DEFAULT_FD_STEP)?;
    Ok(per_tensor(&model, &GradComparison { analytic, numeric }))
}
