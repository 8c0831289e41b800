use lattice_nmt::corpus::{encode_target, generate_toy, Checkpoint, ToyCorpus, ToyTaskSpec};
use lattice_nmt::numerics::Matrix;
use lattice_nmt::training::{
    batch_gradient, example_loss, rmsprop_update, train, validation_accuracy, Example, Hyperparams, RmspropState, TrainOptions,
};
use lattice_nmt::{build_lattice, build_vocab, CellKind, CharSeq, ComposeMode, ModelConfig, ModelParams, ParameterStore, Parameters, Tokenization, Vocab};

fn scalar(v: f64) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert("theta", Matrix::from_vec(1, 1, vec![v]).unwrap());
    s
}

fn value(s: &ParameterStore) -> f64 {
    s.get("theta").unwrap().get(0, 0)
}

/// The update written out directly, one scalar at a time.
fn rmsprop_oracle(theta0: f64, grads: &[f64], lr: f64, rho: f64, eps: f64) -> Vec<f64> {
    let (mut theta, mut n, mut m) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for &g in grads {
        n = rho * n + (1.0 - rho) * g * g;
        m = rho * m + (1.0 - rho) * g;
        theta -= lr * g / (n - m * m + eps).sqrt();
        out.push(theta);
    }
    out
}

fn run_rmsprop(theta0: f64, grads: &[f64], hp: &Hyperparams) -> Vec<f64> {
    let mut p = scalar(theta0);
    let mut st = RmspropState::new(&p);
    grads
        .iter()
        .map(|&g| {
            rmsprop_update(&mut p, &scalar(g), &mut st, hp).unwrap();
            value(&p)
        })
        .collect()
}

#[test]
fn rmsprop_matches_scalar_recurrence() {
    let hp = Hyperparams::default();
    let grads: Vec<f64> = (0..100).map(|t| (0.37 * t as f64).sin() * 2.0 + 0.1).collect();
    let got = run_rmsprop(0.25, &grads, &hp);
    let want = rmsprop_oracle(0.25, &grads, hp.lr, hp.rmsprop_rho, hp.rmsprop_eps);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    let constant = [1.0; 10];
    let got = run_rmsprop(0.0, &constant, &hp);
    let want = rmsprop_oracle(0.0, &constant, hp.lr, hp.rmsprop_rho, hp.rmsprop_eps);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!((got[0] + 5e-3).abs() < 1e-12);
}

struct Toy {
    corpus: ToyCorpus,
    src: Vocab,
    tgt: Vocab,
}

fn toy(sentences: usize) -> Toy {
    let corpus = generate_toy(&ToyTaskSpec {
        sentences,
        ..ToyTaskSpec::default()
    })
    .unwrap();
    let train = &corpus.splits[0];
    let src = build_vocab(train.segs.iter().flatten().flatten(), 10_000).unwrap();
    let tgt = build_vocab(train.tgt.iter().flatten(), 10_000).unwrap();
    Toy { corpus, src, tgt }
}

fn examples(t: &Toy, split: usize, segmenters: &[usize]) -> Vec<Example> {
    let sp = &t.corpus.splits[split];
    (0..sp.src.len())
        .map(|i| {
            let toks: Vec<Tokenization> = segmenters.iter().map(|&k| Tokenization::new(sp.segs[k][i].clone())).collect();
            let lat = build_lattice(&CharSeq::new(&sp.src[i]).unwrap(), &toks).unwrap();
            Example::new(&lat, encode_target(&sp.tgt[i], &t.tgt), &t.src).unwrap()
        })
        .collect()
}

fn config(t: &Toy, dim: usize) -> ModelConfig {
    ModelConfig {
        src_vocab: t.src.len(),
        tgt_vocab: t.tgt.len(),
        embed_dim: dim,
        hidden: dim,
        cell: CellKind::Dwl,
        compose: ComposeMode::Gate,
    }
}

fn hp(dim: usize, batch: usize, lr: f64) -> Hyperparams {
    Hyperparams {
        embed_dim: dim,
        hidden: dim,
        batch,
        lr,
        ..Hyperparams::default()
    }
}

#[test]
fn batch_of_copies_equals_single_gradient() {
    let t = toy(20);
    let ex = examples(&t, 0, &[0, 1, 2]);
    let model = ModelParams::init(config(&t, 6), 3);
    let (loss, single) = example_loss(&model, &ex[0].input, &ex[0].target).unwrap();
    let copies: Vec<&Example> = vec![&ex[0]; 4];
    let (bloss, batch) = batch_gradient(&model, &copies).unwrap();
    assert!((loss - bloss).abs() <= 1e-12 * loss.abs().max(1.0));
    for (a, b) in single.flatten().iter().zip(batch.flatten()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    // Mixed batch: the mean of the per-sentence gradients.
    let (_, g1) = example_loss(&model, &ex[1].input, &ex[1].target).unwrap();
    let (_, mixed) = batch_gradient(&model, &[&ex[0], &ex[1]]).unwrap();
    for ((a, b), m) in single.flatten().iter().zip(g1.flatten()).zip(mixed.flatten()) {
        assert!(((a + b) / 2.0 - m).abs() <= 1e-12);
    }
}

fn options(hp: Hyperparams, updates: usize) -> TrainOptions {
    TrainOptions {
        hp,
        seed: 4,
        max_epochs: 10_000,
        max_updates: Some(updates),
    }
}

#[test]
fn zero_learning_rate_leaves_checkpoints_unchanged() {
    let t = toy(30);
    let train_set = examples(&t, 0, &[0, 1, 2]);
    let valid = examples(&t, 1, &[0, 1, 2]);
    let init = ModelParams::init(config(&t, 5), 8);
    let h = hp(5, 6, 0.0);
    let report = train(init.clone(), &train_set, &valid, &options(h.clone(), 8), |_| {}).unwrap();
    assert_eq!(report.updates, 8);
    let bytes = |m: &ModelParams| Checkpoint::from_model(m, &h, &t.src, &t.tgt, None).to_bytes();
    assert_eq!(bytes(&report.last), bytes(&init));
    assert_eq!(bytes(&report.best), bytes(&init));
}

#[test]
fn clipping_bounds_every_step() {
    let t = toy(30);
    let train_set = examples(&t, 0, &[0, 1, 2]);
    let valid = examples(&t, 1, &[0, 1, 2]);
    let mut h = hp(6, 4, 5e-3);
    h.clip = 0.05;
    let report = train(ModelParams::init(config(&t, 6), 1), &train_set, &valid, &options(h, 30), |_| {}).unwrap();
    assert_eq!(report.clip_norms.len(), 30);
    assert!(report.clip_norms.iter().any(|(pre, _)| *pre > 0.05));
    for (pre, post) in &report.clip_norms {
        assert!(*post <= 0.05 + 1e-12);
        assert!(post <= pre || (post - pre).abs() <= 1e-12);
    }
}

#[test]
fn repeated_runs_are_identical() {
    let t = toy(30);
    let train_set = examples(&t, 0, &[0, 1, 2]);
    let valid = examples(&t, 1, &[0, 1, 2]);
    let h = hp(6, 5, 5e-3);
    let run = || {
        let mut lines = Vec::new();
        let r = train(ModelParams::init(config(&t, 6), 2), &train_set, &valid, &options(h.clone(), 25), |l| {
            lines.push(l.to_string())
        })
        .unwrap();
        (Checkpoint::from_model(&r.best, &h, &t.src, &t.tgt, None).to_bytes(), lines, r.log)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(!a.1.is_empty());
    for line in &a.1 {
        let parts: Vec<&str> = line.split(' ').collect();
        assert_eq!((parts[0], parts[2], parts[4]), ("epoch", "loss", "val_acc"));
    }
}

#[test]
fn patience_stops_training() {
    let t = toy(30);
    let train_set = examples(&t, 0, &[0, 1, 2]);
    let valid = examples(&t, 1, &[0, 1, 2]);
    let mut h = hp(4, 8, 0.0);
    h.patience_epochs = 2;
    let r = train(ModelParams::init(config(&t, 4), 2), &train_set, &valid, &options(h, 10_000), |_| {}).unwrap();
    // Nothing can improve at lr = 0: the first epoch sets the best, two more exhaust patience.
    assert_eq!(r.epochs.len(), 3);
    assert_eq!(r.best_epoch, 1);
}

#[test]
fn memorizes_ten_sentences() {
    let t = toy(13);
    let train_set: Vec<Example> = examples(&t, 0, &[0, 1, 2]).into_iter().take(10).collect();
    assert_eq!(train_set.len(), 10);
    let mut h = hp(24, 10, 1e-2);
    h.patience_epochs = 1000;
    let r = train(ModelParams::init(config(&t, 24), 5), &train_set, &train_set, &options(h, 200), |_| {}).unwrap();
    let first = r.epochs.first().unwrap().loss;
    let last = r.epochs.last().unwrap().loss;
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    let acc = validation_accuracy(&r.best, &train_set, 20).unwrap();
    assert!(acc >= 0.9, "training accuracy {acc}");
}
