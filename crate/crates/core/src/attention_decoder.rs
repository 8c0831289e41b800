//! Attention decoder.
//!
//! At target step `j`:
//!
//! ```text
//! e_i   = v_aᵀ tanh(W_a s_{j-1} + U_a h_i)
//! α     = softmax(e)
//! m_j   = Σ_i α_i h_i
//! s_j   = GRU([E y_{j-1} ; m_j], s_{j-1})
//! p(y_j) = softmax(W_o tanh(W_y E y_{j-1} + W_s s_j + W_m m_j))
//! ```
//!
//! with `s_0 = tanh(W_init · backward half of h_1)`.

use crate::recurrent_cells::{gru_backward, gru_forward, CellParams, GruCache};
use crate::lattice_encoder::Annotations;
use crate::error::{Error, Result};
use crate::numerics::{add_into, axpy, dot, log_softmax, softmax_in_place, Matrix};
use crate::params::{Parameters, Visitor, VisitorMut};
use crate::vocab::{BOS, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `a × d_dec`
    pub w_a: Matrix,
    /// `a × 2d`
    pub u_a: Matrix,
    /// `a × 1`
    pub v_a: Matrix,
}

impl Parameters for AttentionParams {
    fn visit<'a>(&'a self, prefix: &str, v: &mut Visitor<'_, 'a>) {
        v(format!("{prefix}u_a"), &self.u_a);
        v(format!("{prefix}v_a"), &self.v_a);
        v(format!("{prefix}w_a"), &self.w_a);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, v: &mut VisitorMut<'_, 'a>) {
        v(format!("{prefix}u_a"), &mut self.u_a);
        v(format!("{prefix}v_a"), &mut self.v_a);
        v(format!("{prefix}w_a"), &mut self.w_a);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub att: AttentionParams,
    /// GRU over `[target embedding ; context]`.
    pub cell: CellParams,
    /// `|V_tgt| × e_tgt`
    pub embed: Matrix,
    /// Readout: `o × e_tgt`, `o × d_dec`, `o × 2d`, `|V_tgt| × o`.
    pub w_y: Matrix,
    pub w_s: Matrix,
    pub w_m: Matrix,
    pub w_o: Matrix,
    /// `d_dec × d`
    pub w_init: Matrix,
}

/// Shapes of a decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderDims {
    pub tgt_vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Width of one encoder direction; annotations are twice this.
    pub enc_hidden: usize,
    pub attention: usize,
    pub readout: usize,
}

impl DecoderParams {
    pub fn zeros(dims: DecoderDims) -> Self {
        let ann = 2 * dims.enc_hidden;
        DecoderParams {
            att: AttentionParams {
                w_a: Matrix::zeros(dims.attention, dims.hidden),
                u_a: Matrix::zeros(dims.attention, ann),
                v_a: Matrix::zeros(dims.attention, 1),
            },
            cell: CellParams::zeros(dims.embed + ann, dims.hidden),
            embed: Matrix::zeros(dims.tgt_vocab, dims.embed),
            w_y: Matrix::zeros(dims.readout, dims.embed),
            w_s: Matrix::zeros(dims.readout, dims.hidden),
            w_m: Matrix::zeros(dims.readout, ann),
            w_o: Matrix::zeros(dims.tgt_vocab, dims.readout),
            w_init: Matrix::zeros(dims.hidden, dims.enc_hidden),
        }
    }

    pub fn tgt_vocab(&self) -> usize {
        self.embed.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.cell.hidden_dim()
    }

    pub fn annotation_dim(&self) -> usize {
        self.att.u_a.cols()
    }

    fn check_annotations(&self, ann: &Annotations) -> Result<()> {
        if ann.is_empty() {
            return Err(Error::EmptyInput("annotations"));
        }
        for h in &ann.h {
            if h.len() != self.annotation_dim() {
                return Err(Error::dim("annotation", self.annotation_dim(), h.len()));
            }
        }
        Ok(())
    }
}

impl Parameters for DecoderParams {
    fn visit<'a>(&'a self, prefix: &str, v: &mut Visitor<'_, 'a>) {
        self.att.visit(&format!("{prefix}att."), v);
        self.cell.visit(&format!("{prefix}cell."), v);
        v(format!("{prefix}embed"), &self.embed);
        v(format!("{prefix}init"), &self.w_init);
        v(format!("{prefix}out.w_m"), &self.w_m);
        v(format!("{prefix}out.w_o"), &self.w_o);
        v(format!("{prefix}out.w_s"), &self.w_s);
        v(format!("{prefix}out.w_y"), &self.w_y);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, v: &mut VisitorMut<'_, 'a>) {
        self.att.visit_mut(&format!("{prefix}att."), v);
        self.cell.visit_mut(&format!("{prefix}cell."), v);
        v(format!("{prefix}embed"), &mut self.embed);
        v(format!("{prefix}init"), &mut self.w_init);
        v(format!("{prefix}out.w_m"), &mut self.w_m);
        v(format!("{prefix}out.w_o"), &mut self.w_o);
        v(format!("{prefix}out.w_s"), &mut self.w_s);
        v(format!("{prefix}out.w_y"), &mut self.w_y);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub s: Vec<f64>,
    pub prev_token: usize,
    pub step: usize,
}

pub fn init_state(ann: &Annotations, dp: &DecoderParams) -> Result<Vec<f64>> {
    dp.check_annotations(ann)?;
    Ok(init_vector(ann, dp))
}

fn init_vector(ann: &Annotations, dp: &DecoderParams) -> Vec<f64> {
    let mut s = dp.w_init.mul_vec(ann.backward_half(0));
    s.iter_mut().for_each(|v| *v = v.tanh());
    s
}

/// Start-of-decoding state: `s_0`, previous token BOS, step 1.
pub fn initial_decode_state(ann: &Annotations, dp: &DecoderParams) -> Result<DecodeState> {
    Ok(DecodeState {
        s: init_state(ann, dp)?,
        prev_token: BOS,
        step: 1,
    })
}

/// Annotations with their projections `U_a h_i`, computed once per sentence.
struct Memory<'a> {
    ann: &'a Annotations,
    keys: Vec<Vec<f64>>,
}

impl<'a> Memory<'a> {
    fn new(ann: &'a Annotations, ap: &AttentionParams) -> Self {
        Memory {
            ann,
            keys: ann.h.iter().map(|h| ap.u_a.mul_vec(h)).collect(),
        }
    }
}

struct AttendRecord {
    /// `tanh(W_a s + U_a h_i)` per annotation.
    q: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    context: Vec<f64>,
}

fn attend_mem(s_prev: &[f64], mem: &Memory<'_>, ap: &AttentionParams) -> AttendRecord {
    let query = ap.w_a.mul_vec(s_prev);
    let mut q = Vec::with_capacity(mem.keys.len());
    let mut alpha = Vec::with_capacity(mem.keys.len());
    for key in &mem.keys {
        let qi: Vec<f64> = key.iter().zip(&query).map(|(k, w)| (k + w).tanh()).collect();
        alpha.push(dot(ap.v_a.as_slice(), &qi));
        q.push(qi);
    }
    softmax_in_place(&mut alpha);
    let mut context = vec![0.0; mem.ann.dim()];
    for (a, h) in alpha.iter().zip(&mem.ann.h) {
        axpy(*a, h, &mut context);
    }
    AttendRecord { q, alpha, context }
}

/// Attention weights over the annotations and the resulting context vector.
pub fn attend(s_prev: &[f64], ann: &Annotations, ap: &AttentionParams) -> Result<(Vec<f64>, Vec<f64>)> {
    if ann.is_empty() {
        return Err(Error::EmptyInput("annotations"));
    }
    if s_prev.len() != ap.w_a.cols() {
        return Err(Error::dim("attend state", ap.w_a.cols(), s_prev.len()));
    }
    for h in &ann.h {
        if h.len() != ap.u_a.cols() {
            return Err(Error::dim("attend annotation", ap.u_a.cols(), h.len()));
        }
    }
    let rec = attend_mem(s_prev, &Memory::new(ann, ap), ap);
    Ok((rec.alpha, rec.context))
}

fn decoder_input(prev: usize, m: &[f64], dp: &DecoderParams) -> Vec<f64> {
    let mut x = dp.embed.row(prev).to_vec();
    x.extend_from_slice(m);
    x
}

/// `s_j = GRU([E y_{j-1} ; m_j], s_{j-1})`.
pub fn decoder_step(state: &DecodeState, m: &[f64], dp: &DecoderParams) -> Result<DecodeState> {
    check_step(state, m, dp)?;
    let (s, _) = gru_forward(&decoder_input(state.prev_token, m, dp), &state.s, &dp.cell);
    Ok(DecodeState {
        s,
        prev_token: state.prev_token,
        step: state.step + 1,
    })
}

fn check_step(state: &DecodeState, m: &[f64], dp: &DecoderParams) -> Result<()> {
    if state.prev_token >= dp.tgt_vocab() {
        return Err(Error::dim("target token id", dp.tgt_vocab(), state.prev_token + 1));
    }
    if m.len() != dp.annotation_dim() {
        return Err(Error::dim("decoder context", dp.annotation_dim(), m.len()));
    }
    if state.s.len() != dp.hidden_dim() {
        return Err(Error::dim("decoder state", dp.hidden_dim(), state.s.len()));
    }
    Ok(())
}

fn readout(prev: usize, s: &[f64], m: &[f64], dp: &DecoderParams) -> (Vec<f64>, Vec<f64>) {
    let mut t = dp.w_y.mul_vec(dp.embed.row(prev));
    let a = dp.w_s.mul_vec(s);
    let b = dp.w_m.mul_vec(m);
    for i in 0..t.len() {
        t[i] = (t[i] + a[i] + b[i]).tanh();
    }
    let logits = dp.w_o.mul_vec(&t);
    (t, logits)
}

/// `p(y_j | y_{<j}, x)` for a state produced by [`decoder_step`].
pub fn output_distribution(state: &DecodeState, m: &[f64], dp: &DecoderParams) -> Result<Vec<f64>> {
    check_step(state, m, dp)?;
    let (_, mut p) = readout(state.prev_token, &state.s, m, dp);
    softmax_in_place(&mut p);
    Ok(p)
}

/// Lowest index among the maximal entries.
fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest entries, ties toward lower indices.
fn top_k(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Greedy decoding; the returned tokens exclude EOS.
pub fn greedy_decode(ann: &Annotations, dp: &DecoderParams, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    dp.check_annotations(ann)?;
    let mem = Memory::new(ann, &dp.att);
    let mut s = init_vector(ann, dp);
    let mut prev = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let rec = attend_mem(&s, &mem, &dp.att);
        let (next, _) = gru_forward(&decoder_input(prev, &rec.context, dp), &s, &dp.cell);
        s = next;
        let (_, logits) = readout(prev, &s, &rec.context, dp);
        let tok = argmax(&logits);
        if tok == EOS {
            break;
        }
        out.push(tok);
        prev = tok;
    }
    Ok(out)
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    score: f64,
    s: Vec<f64>,
}

/// Beam search. Hypotheses are ranked by summed log-probability within a step;
/// completed hypotheses are compared by score divided by token count (EOS
/// included) when `length_norm` is set. Width 1 reproduces [`greedy_decode`].
pub fn beam_decode(
    ann: &Annotations,
    dp: &DecoderParams,
    max_len: usize,
    beam_width: usize,
    length_norm: bool,
) -> Result<Vec<usize>> {
    if max_len == 0 || beam_width == 0 {
        return Err(Error::Config("max_len and beam width must be at least 1".into()));
    }
    dp.check_annotations(ann)?;
    let mem = Memory::new(ann, &dp.att);
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        s: init_vector(ann, dp),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cands: Vec<(f64, usize, usize, Vec<f64>)> = Vec::new();
        for (pi, h) in live.iter().enumerate() {
            let prev = h.tokens.last().copied().unwrap_or(BOS);
            let rec = attend_mem(&h.s, &mem, &dp.att);
            let (s, _) = gru_forward(&decoder_input(prev, &rec.context, dp), &h.s, &dp.cell);
            let (_, logits) = readout(prev, &s, &rec.context, dp);
            let logp = log_softmax(&logits);
            for tok in top_k(&logits, beam_width) {
                cands.push((h.score + logp[tok], pi, tok, s.clone()));
            }
        }
        // Stable: equal scores keep (parent, token) order.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::new();
        for (score, pi, tok, s) in cands.into_iter().take(beam_width) {
            let mut tokens = live[pi].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis { tokens, score, s };
            if tok == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= beam_width {
            break;
        }
    }
    let norm = |h: &Hypothesis| {
        if length_norm {
            h.score / h.tokens.len() as f64
        } else {
            h.score
        }
    };
    let pool = if finished.is_empty() { &live } else { &finished };
    let mut best = &pool[0];
    for h in &pool[1..] {
        if norm(h) > norm(best) {
            best = h;
        }
    }
    let mut tokens = best.tokens.clone();
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Ok(tokens)
}

/// Forward record of teacher-forced decoding.
pub(crate) struct DecoderTape {
    s0: Vec<f64>,
    steps: Vec<StepRecord>,
}

struct StepRecord {
    prev: usize,
    target: usize,
    s_prev: Vec<f64>,
    att: AttendRecord,
    gru: GruCache,
    s: Vec<f64>,
    t: Vec<f64>,
    probs: Vec<f64>,
}

/// Teacher-forced negative log-likelihood of `targets` (which end with EOS).
pub(crate) fn decoder_forward(
    ann: &Annotations,
    dp: &DecoderParams,
    targets: &[usize],
) -> Result<(f64, DecoderTape)> {
    dp.check_annotations(ann)?;
    if targets.is_empty() {
        return Err(Error::EmptyInput("target sequence"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= dp.tgt_vocab()) {
        return Err(Error::dim("target token id", dp.tgt_vocab(), bad + 1));
    }
    let mem = Memory::new(ann, &dp.att);
    let s0 = init_vector(ann, dp);
    let mut s_prev = s0.clone();
    let mut prev = BOS;
    let mut loss = 0.0;
    let mut steps = Vec::with_capacity(targets.len());
    for &y in targets {
        let att = attend_mem(&s_prev, &mem, &dp.att);
        let (s, gru) = gru_forward(&decoder_input(prev, &att.context, dp), &s_prev, &dp.cell);
        let (t, logits) = readout(prev, &s, &att.context, dp);
        let logp = log_softmax(&logits);
        loss -= logp[y];
        let probs = logp.iter().map(|v| v.exp()).collect();
        steps.push(StepRecord {
            prev,
            target: y,
            s_prev: std::mem::take(&mut s_prev),
            att,
            gru,
            s: s.clone(),
            t,
            probs,
        });
        s_prev = s;
        prev = y;
    }
    Ok((loss, DecoderTape { s0, steps }))
}

/// Backward pass of [`decoder_forward`]; returns the gradient for each annotation.
pub(crate) fn decoder_backward(
    tape: &DecoderTape,
    ann: &Annotations,
    dp: &DecoderParams,
    grads: &mut DecoderParams,
) -> Vec<Vec<f64>> {
    let n = ann.len();
    let e = dp.embed.cols();
    let dann_dim = dp.annotation_dim();
    let a = dp.att.w_a.rows();
    let mut dann = vec![vec![0.0; dann_dim]; n];
    // Σ_j ∂L/∂(U_a h_i + W_a s_{j-1}) per annotation, folded into U_a at the end.
    let mut dkeys = vec![vec![0.0; a]; n];
    let mut ds_next = vec![0.0; dp.hidden_dim()];

    for st in tape.steps.iter().rev() {
        let mut dlogits = st.probs.clone();
        dlogits[st.target] -= 1.0;
        grads.w_o.add_outer(&dlogits, &st.t);
        let mut dt = vec![0.0; st.t.len()];
        dp.w_o.tmul_vec_acc(&dlogits, &mut dt);
        for (g, t) in dt.iter_mut().zip(&st.t) {
            *g *= 1.0 - t * t;
        }
        let emb_prev = dp.embed.row(st.prev);
        grads.w_y.add_outer(&dt, emb_prev);
        dp.w_y.tmul_vec_acc(&dt, grads.embed.row_mut(st.prev));
        grads.w_s.add_outer(&dt, &st.s);
        let mut ds = ds_next;
        dp.w_s.tmul_vec_acc(&dt, &mut ds);
        grads.w_m.add_outer(&dt, &st.att.context);
        let mut dm = vec![0.0; dann_dim];
        dp.w_m.tmul_vec_acc(&dt, &mut dm);

        let mut dx = vec![0.0; e + dann_dim];
        let mut ds_prev = vec![0.0; ds.len()];
        gru_backward(&st.gru, &dp.cell, &ds, &mut grads.cell, &mut dx, &mut ds_prev);
        add_into(&dx[..e], grads.embed.row_mut(st.prev));
        add_into(&dx[e..], &mut dm);

        // Attention.
        let dalpha: Vec<f64> = ann.h.iter().map(|h| dot(&dm, h)).collect();
        let mean: f64 = st.att.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let mut dquery = vec![0.0; a];
        for i in 0..n {
            axpy(st.att.alpha[i], &dm, &mut dann[i]);
            let de = st.att.alpha[i] * (dalpha[i] - mean);
            if de == 0.0 {
                continue;
            }
            let q = &st.att.q[i];
            axpy(de, q, grads.att.v_a.as_mut_slice());
            for k in 0..a {
                let dpre = de * dp.att.v_a.as_slice()[k] * (1.0 - q[k] * q[k]);
                dquery[k] += dpre;
                dkeys[i][k] += dpre;
            }
        }
        grads.att.w_a.add_outer(&dquery, &st.s_prev);
        dp.att.w_a.tmul_vec_acc(&dquery, &mut ds_prev);
        ds_next = ds_prev;
    }

    for i in 0..n {
        grads.att.u_a.add_outer(&dkeys[i], &ann.h[i]);
        dp.att.u_a.tmul_vec_acc(&dkeys[i], &mut dann[i]);
    }

    // s_0 = tanh(W_init b_1)
    let da: Vec<f64> = ds_next
        .iter()
        .zip(&tape.s0)
        .map(|(g, s)| g * (1.0 - s * s))
        .collect();
    let half = dann_dim / 2;
    grads.w_init.add_outer(&da, &ann.h[0][half..]);
    dp.w_init.tmul_vec_acc(&da, &mut dann[0][half..]);
    dann
}
