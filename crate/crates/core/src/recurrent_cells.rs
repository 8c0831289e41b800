//! GRU family used by the lattice encoder and the decoder.
//!
//! * [`gru_step`]: the standard GRU (no bias vectors).
//! * [`swl_gru_step`]: shallow lattice GRU. The K inputs and the K predecessor
//!   states are each composed into one vector, then a standard GRU runs on the pair.
//! * [`dwl_gru_step`]: deep lattice GRU. One GRU runs per incoming edge and the K
//!   resulting states are composed.
//!
//! Composition is either elementwise max ([`compose_pool`]) or a normalized
//! scalar gate per component ([`compose_gate`]). Every forward step returns a
//! [`StepCache`] that [`cell_backward`] replays to produce exact gradients.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{add_into, axpy, dot, sigmoid_scalar, Matrix};
use crate::params::{Parameters, Visitor, VisitorMut};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Gru,
    Swl,
    Dwl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ComposeMode {
    Pool,
    Gate,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Swl => "swl",
            CellKind::Dwl => "dwl",
        })
    }
}

impl FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(CellKind::Gru),
            "swl" => Ok(CellKind::Swl),
            "dwl" => Ok(CellKind::Dwl),
            _ => Err(Error::Config(format!("unknown cell kind `{s}`"))),
        }
    }
}

impl fmt::Display for ComposeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ComposeMode::Pool => "pool",
            ComposeMode::Gate => "gate",
        })
    }
}

impl FromStr for ComposeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pool" => Ok(ComposeMode::Pool),
            "gate" => Ok(ComposeMode::Gate),
            _ => Err(Error::Config(format!("unknown composition `{s}`"))),
        }
    }
}

/// GRU weights. `w*` are `d×e` (input side), `u*` are `d×d` (recurrent side).
#[derive(Clone, Debug, PartialEq)]
pub struct CellParams {
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub w: Matrix,
    pub u: Matrix,
}

impl CellParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        CellParams {
            w_r: Matrix::zeros(hidden, input_dim),
            u_r: Matrix::zeros(hidden, hidden),
            w_z: Matrix::zeros(hidden, input_dim),
            u_z: Matrix::zeros(hidden, hidden),
            w: Matrix::zeros(hidden, input_dim),
            u: Matrix::zeros(hidden, hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.u.rows()
    }

    fn check(&self, x: usize, h: usize) -> Result<()> {
        if x != self.input_dim() {
            return Err(Error::dim("gru input", self.input_dim(), x));
        }
        if h != self.hidden_dim() {
            return Err(Error::dim("gru state", self.hidden_dim(), h));
        }
        Ok(())
    }
}

impl Parameters for CellParams {
    fn visit<'a>(&'a self, prefix: &str, v: &mut Visitor<'_, 'a>) {
        v(format!("{prefix}u"), &self.u);
        v(format!("{prefix}u_r"), &self.u_r);
        v(format!("{prefix}u_z"), &self.u_z);
        v(format!("{prefix}w"), &self.w);
        v(format!("{prefix}w_r"), &self.w_r);
        v(format!("{prefix}w_z"), &self.w_z);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, v: &mut VisitorMut<'_, 'a>) {
        v(format!("{prefix}u"), &mut self.u);
        v(format!("{prefix}u_r"), &mut self.u_r);
        v(format!("{prefix}u_z"), &mut self.u_z);
        v(format!("{prefix}w"), &mut self.w);
        v(format!("{prefix}w_r"), &mut self.w_r);
        v(format!("{prefix}w_z"), &mut self.w_z);
    }
}

/// Gating composition weights: `u_g` is `1×dim`, `b_g` is `1×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposeParams {
    pub u_g: Matrix,
    pub b_g: Matrix,
}

impl ComposeParams {
    pub fn zeros(dim: usize) -> Self {
        ComposeParams {
            u_g: Matrix::zeros(1, dim),
            b_g: Matrix::zeros(1, 1),
        }
    }

    pub fn new(u_g: Vec<f64>, b_g: f64) -> Self {
        let dim = u_g.len();
        ComposeParams {
            u_g: Matrix::from_vec(1, dim, u_g).expect("row vector"),
            b_g: Matrix::from_vec(1, 1, vec![b_g]).expect("scalar"),
        }
    }

    pub fn dim(&self) -> usize {
        self.u_g.cols()
    }

    pub fn bias(&self) -> f64 {
        self.b_g.as_slice()[0]
    }
}

impl Parameters for ComposeParams {
    fn visit<'a>(&'a self, prefix: &str, v: &mut Visitor<'_, 'a>) {
        v(format!("{prefix}b"), &self.b_g);
        v(format!("{prefix}u"), &self.u_g);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, v: &mut VisitorMut<'_, 'a>) {
        v(format!("{prefix}b"), &mut self.b_g);
        v(format!("{prefix}u"), &mut self.u_g);
    }
}

/// A GRU plus the composition weights a lattice cell needs.
///
/// `gate_input` composes edge embeddings (shallow cell, gate mode only);
/// `gate_state` composes hidden states (both lattice cells, gate mode only).
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeCellParams {
    pub cell: CellParams,
    pub gate_input: Option<ComposeParams>,
    pub gate_state: Option<ComposeParams>,
}

impl LatticeCellParams {
    /// Zero-initialized parameters with exactly the tensors `kind`/`mode` use.
    pub fn zeros(kind: CellKind, mode: ComposeMode, input_dim: usize, hidden: usize) -> Self {
        let gated = mode == ComposeMode::Gate;
        LatticeCellParams {
            cell: CellParams::zeros(input_dim, hidden),
            gate_input: (gated && kind == CellKind::Swl).then(|| ComposeParams::zeros(input_dim)),
            gate_state: (gated && kind != CellKind::Gru).then(|| ComposeParams::zeros(hidden)),
        }
    }
}

impl Parameters for LatticeCellParams {
    fn visit<'a>(&'a self, prefix: &str, v: &mut Visitor<'_, 'a>) {
        self.cell.visit(&format!("{prefix}cell."), v);
        if let Some(g) = &self.gate_state {
            g.visit(&format!("{prefix}gate_h."), v);
        }
        if let Some(g) = &self.gate_input {
            g.visit(&format!("{prefix}gate_x."), v);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, v: &mut VisitorMut<'_, 'a>) {
        self.cell.visit_mut(&format!("{prefix}cell."), v);
        if let Some(g) = &mut self.gate_state {
            g.visit_mut(&format!("{prefix}gate_h."), v);
        }
        if let Some(g) = &mut self.gate_input {
            g.visit_mut(&format!("{prefix}gate_x."), v);
        }
    }
}

/// The K `(input, predecessor state)` pairs arriving at one node, in edge order.
#[derive(Clone, Debug)]
pub struct StepInputs<'a> {
    pub pairs: Vec<(&'a [f64], &'a [f64])>,
}

impl<'a> StepInputs<'a> {
    pub fn new(pairs: Vec<(&'a [f64], &'a [f64])>) -> Self {
        StepInputs { pairs }
    }

    pub fn single(x: &'a [f64], h: &'a [f64]) -> Self {
        StepInputs {
            pairs: vec![(x, h)],
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn check(&self, p: &CellParams) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyInput("step inputs"));
        }
        for (x, h) in &self.pairs {
            p.check(x.len(), h.len())?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Standard GRU

#[derive(Clone, Debug)]
pub struct GruCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    cand: Vec<f64>,
}

impl GruCache {
    pub fn reset_gate(&self) -> &[f64] {
        &self.r
    }

    pub fn update_gate(&self) -> &[f64] {
        &self.z
    }

    pub fn candidate(&self) -> &[f64] {
        &self.cand
    }
}

pub(crate) fn gru_forward(x: &[f64], h_prev: &[f64], p: &CellParams) -> (Vec<f64>, GruCache) {
    let d = p.hidden_dim();
    let mut r = p.w_r.mul_vec(x);
    let mut tmp = vec![0.0; d];
    p.u_r.mul_vec_into(h_prev, &mut tmp);
    for (ri, t) in r.iter_mut().zip(&tmp) {
        *ri = sigmoid_scalar(*ri + t);
    }
    let mut z = p.w_z.mul_vec(x);
    p.u_z.mul_vec_into(h_prev, &mut tmp);
    for (zi, t) in z.iter_mut().zip(&tmp) {
        *zi = sigmoid_scalar(*zi + t);
    }
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let mut cand = p.w.mul_vec(x);
    p.u.mul_vec_into(&rh, &mut tmp);
    for (c, t) in cand.iter_mut().zip(&tmp) {
        *c = (*c + t).tanh();
    }
    let h: Vec<f64> = (0..d)
        .map(|i| z[i] * h_prev[i] + (1.0 - z[i]) * cand[i])
        .collect();
    let cache = GruCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        r,
        z,
        cand,
    };
    (h, cache)
}

/// Accumulates parameter gradients into `grads` and input gradients into `dx`, `dh_prev`.
pub(crate) fn gru_backward(
    c: &GruCache,
    p: &CellParams,
    dh: &[f64],
    grads: &mut CellParams,
    dx: &mut [f64],
    dh_prev: &mut [f64],
) {
    let d = dh.len();
    let mut da_c = vec![0.0; d];
    let mut da_z = vec![0.0; d];
    for i in 0..d {
        let dz = dh[i] * (c.h_prev[i] - c.cand[i]);
        dh_prev[i] += dh[i] * c.z[i];
        let dcand = dh[i] * (1.0 - c.z[i]);
        da_c[i] = dcand * (1.0 - c.cand[i] * c.cand[i]);
        da_z[i] = dz * c.z[i] * (1.0 - c.z[i]);
    }
    let rh: Vec<f64> = c.r.iter().zip(&c.h_prev).map(|(a, b)| a * b).collect();
    grads.w.add_outer(&da_c, &c.x);
    grads.u.add_outer(&da_c, &rh);
    p.w.tmul_vec_acc(&da_c, dx);
    let mut drh = vec![0.0; d];
    p.u.tmul_vec_acc(&da_c, &mut drh);
    let mut da_r = vec![0.0; d];
    for i in 0..d {
        dh_prev[i] += drh[i] * c.r[i];
        let dr = drh[i] * c.h_prev[i];
        da_r[i] = dr * c.r[i] * (1.0 - c.r[i]);
    }
    grads.w_z.add_outer(&da_z, &c.x);
    grads.u_z.add_outer(&da_z, &c.h_prev);
    p.w_z.tmul_vec_acc(&da_z, dx);
    p.u_z.tmul_vec_acc(&da_z, dh_prev);
    grads.w_r.add_outer(&da_r, &c.x);
    grads.u_r.add_outer(&da_r, &c.h_prev);
    p.w_r.tmul_vec_acc(&da_r, dx);
    p.u_r.tmul_vec_acc(&da_r, dh_prev);
}

/// One standard GRU transition.
pub fn gru_step(x: &[f64], h_prev: &[f64], p: &CellParams) -> Result<Vec<f64>> {
    p.check(x.len(), h_prev.len())?;
    Ok(gru_forward(x, h_prev, p).0)
}

// ---------------------------------------------------------------------------
// Composition functions

#[derive(Clone, Debug)]
pub enum ComposeCache {
    /// Index of the winning component per coordinate (lowest index on ties).
    Pool { argmax: Vec<usize>, count: usize },
    Gate {
        inputs: Vec<Vec<f64>>,
        raw: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl ComposeCache {
    /// Number of composed components K.
    pub fn count(&self) -> usize {
        match self {
            ComposeCache::Pool { count, .. } => *count,
            ComposeCache::Gate { raw, .. } => raw.len(),
        }
    }
}

fn check_components(vs: &[&[f64]], dim: Option<usize>) -> Result<usize> {
    let first = vs.first().ok_or(Error::EmptyInput("composition"))?;
    let d = dim.unwrap_or(first.len());
    for v in vs {
        if v.len() != d {
            return Err(Error::dim("composition", d, v.len()));
        }
    }
    Ok(d)
}

pub(crate) fn pool_forward(vs: &[&[f64]]) -> (Vec<f64>, ComposeCache) {
    let mut out = vs[0].to_vec();
    let mut argmax = vec![0; out.len()];
    for (k, v) in vs.iter().enumerate().skip(1) {
        for i in 0..out.len() {
            if v[i] > out[i] {
                out[i] = v[i];
                argmax[i] = k;
            }
        }
    }
    (
        out,
        ComposeCache::Pool {
            argmax,
            count: vs.len(),
        },
    )
}

pub(crate) fn gate_forward(vs: &[&[f64]], p: &ComposeParams) -> (Vec<f64>, ComposeCache) {
    let k = vs.len();
    if k == 1 {
        let out = vs[0].to_vec();
        let cache = ComposeCache::Gate {
            inputs: vec![out.clone()],
            raw: vec![sigmoid_scalar(dot(p.u_g.as_slice(), vs[0]) + p.bias())],
            weights: vec![1.0],
        };
        return (out, cache);
    }
    let raw: Vec<f64> = vs
        .iter()
        .map(|v| sigmoid_scalar(dot(p.u_g.as_slice(), v) + p.bias()))
        .collect();
    let sum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|r| r / sum).collect();
    let mut out = vec![0.0; vs[0].len()];
    for (w, v) in weights.iter().zip(vs) {
        axpy(*w, v, &mut out);
    }
    let cache = ComposeCache::Gate {
        inputs: vs.iter().map(|v| v.to_vec()).collect(),
        raw,
        weights,
    };
    (out, cache)
}

/// Backward through a composition; adds into `dvs[k]` and the gate gradients.
pub(crate) fn compose_backward(
    cache: &ComposeCache,
    p: Option<&ComposeParams>,
    dout: &[f64],
    grads: Option<&mut ComposeParams>,
    dvs: &mut [Vec<f64>],
) -> Result<()> {
    match cache {
        ComposeCache::Pool { argmax, .. } => {
            for (i, &k) in argmax.iter().enumerate() {
                dvs[k][i] += dout[i];
            }
        }
        ComposeCache::Gate {
            inputs,
            raw,
            weights,
        } => {
            let p = p.ok_or_else(|| Error::State("gate cache without gate parameters".into()))?;
            let grads =
                grads.ok_or_else(|| Error::State("gate cache without gate gradient slot".into()))?;
            if inputs.len() == 1 {
                add_into(dout, &mut dvs[0]);
                return Ok(());
            }
            let sum: f64 = raw.iter().sum();
            let dw: Vec<f64> = inputs.iter().map(|v| dot(dout, v)).collect();
            let wdw: f64 = weights.iter().zip(&dw).map(|(w, g)| w * g).sum();
            for k in 0..inputs.len() {
                axpy(weights[k], dout, &mut dvs[k]);
                let draw = (dw[k] - wdw) / sum;
                let ds = draw * raw[k] * (1.0 - raw[k]);
                grads.u_g.add_outer(&[ds], &inputs[k]);
                grads.b_g.as_mut_slice()[0] += ds;
                axpy(ds, p.u_g.as_slice(), &mut dvs[k]);
            }
        }
    }
    Ok(())
}

/// Elementwise maximum over the K components.
pub fn compose_pool(vs: &[&[f64]]) -> Result<Vec<f64>> {
    check_components(vs, None)?;
    Ok(pool_forward(vs).0)
}

/// Weighted sum with weights `σ(u_g·v_k + b_g) / Σ_j σ(u_g·v_j + b_g)`.
/// Returns the composed vector and the K weights.
pub fn compose_gate(vs: &[&[f64]], p: &ComposeParams) -> Result<(Vec<f64>, Vec<f64>)> {
    check_components(vs, Some(p.dim()))?;
    match gate_forward(vs, p) {
        (out, ComposeCache::Gate { weights, .. }) => Ok((out, weights)),
        _ => unreachable!(),
    }
}

fn compose_forward(
    vs: &[&[f64]],
    mode: ComposeMode,
    p: Option<&ComposeParams>,
) -> Result<(Vec<f64>, ComposeCache)> {
    match (mode, p) {
        (ComposeMode::Pool, _) => Ok(pool_forward(vs)),
        (ComposeMode::Gate, Some(p)) => {
            check_components(vs, Some(p.dim()))?;
            Ok(gate_forward(vs, p))
        }
        (ComposeMode::Gate, None) => Err(Error::Config(
            "gate composition requires composition parameters".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Lattice cells

#[derive(Clone, Debug)]
pub enum StepCache {
    Gru(Vec<GruCache>),
    Swl {
        inputs: ComposeCache,
        states: ComposeCache,
        gru: GruCache,
    },
    Dwl {
        branches: Vec<GruCache>,
        states: ComposeCache,
    },
}

impl StepCache {
    pub fn kind(&self) -> CellKind {
        match self {
            StepCache::Gru(_) => CellKind::Gru,
            StepCache::Swl { .. } => CellKind::Swl,
            StepCache::Dwl { .. } => CellKind::Dwl,
        }
    }

    /// Composition weights over the incoming edges, when the step used gating.
    pub fn gate_weights(&self) -> Option<&[f64]> {
        match self {
            StepCache::Swl {
                states: ComposeCache::Gate { weights, .. },
                ..
            }
            | StepCache::Dwl {
                states: ComposeCache::Gate { weights, .. },
                ..
            } => Some(weights),
            _ => None,
        }
    }
}

fn swl_forward(
    inputs: &StepInputs<'_>,
    p: &CellParams,
    gates: Option<(&ComposeParams, &ComposeParams)>,
    mode: ComposeMode,
) -> Result<(Vec<f64>, StepCache)> {
    inputs.check(p)?;
    let xs: Vec<&[f64]> = inputs.pairs.iter().map(|(x, _)| *x).collect();
    let hs: Vec<&[f64]> = inputs.pairs.iter().map(|(_, h)| *h).collect();
    let (x, xc) = compose_forward(&xs, mode, gates.map(|g| g.0))?;
    let (h_pre, hc) = compose_forward(&hs, mode, gates.map(|g| g.1))?;
    let (h, gru) = gru_forward(&x, &h_pre, p);
    Ok((
        h,
        StepCache::Swl {
            inputs: xc,
            states: hc,
            gru,
        },
    ))
}

fn dwl_forward(
    inputs: &StepInputs<'_>,
    p: &CellParams,
    gate: Option<&ComposeParams>,
    mode: ComposeMode,
) -> Result<(Vec<f64>, StepCache)> {
    inputs.check(p)?;
    let mut outs = Vec::with_capacity(inputs.len());
    let mut branches = Vec::with_capacity(inputs.len());
    for (x, h) in &inputs.pairs {
        let (o, c) = gru_forward(x, h, p);
        outs.push(o);
        branches.push(c);
    }
    let views: Vec<&[f64]> = outs.iter().map(Vec::as_slice).collect();
    let (h, states) = compose_forward(&views, mode, gate)?;
    Ok((h, StepCache::Dwl { branches, states }))
}

/// Shallow lattice GRU. `gates` holds the (input-side, state-side) composition
/// parameters and must be present exactly when `mode` is [`ComposeMode::Gate`].
pub fn swl_gru_step(
    inputs: &StepInputs<'_>,
    p: &CellParams,
    gates: Option<(&ComposeParams, &ComposeParams)>,
    mode: ComposeMode,
) -> Result<Vec<f64>> {
    check_mode(mode, gates.is_some())?;
    Ok(swl_forward(inputs, p, gates, mode)?.0)
}

/// Deep lattice GRU. `gate` must be present exactly when `mode` is [`ComposeMode::Gate`].
pub fn dwl_gru_step(
    inputs: &StepInputs<'_>,
    p: &CellParams,
    gate: Option<&ComposeParams>,
    mode: ComposeMode,
) -> Result<Vec<f64>> {
    check_mode(mode, gate.is_some())?;
    Ok(dwl_forward(inputs, p, gate, mode)?.0)
}

fn check_mode(mode: ComposeMode, has_params: bool) -> Result<()> {
    match (mode, has_params) {
        (ComposeMode::Gate, false) => Err(Error::Config(
            "gate composition requires composition parameters".into(),
        )),
        (ComposeMode::Pool, true) => Err(Error::Config(
            "pool composition takes no composition parameters".into(),
        )),
        _ => Ok(()),
    }
}

/// Runs one cell of `kind` over the inputs, recording what the backward pass needs.
///
/// For [`CellKind::Gru`] the pairs are applied as a chain of K sequential steps:
/// the first pair's state seeds the chain and later pairs contribute only their
/// inputs. A lattice node with one incoming edge is the K = 1 case.
pub fn cell_forward(
    kind: CellKind,
    mode: ComposeMode,
    inputs: &StepInputs<'_>,
    p: &LatticeCellParams,
) -> Result<(Vec<f64>, StepCache)> {
    match kind {
        CellKind::Gru => {
            inputs.check(&p.cell)?;
            let mut h = inputs.pairs[0].1.to_vec();
            let mut caches = Vec::with_capacity(inputs.len());
            for (x, _) in &inputs.pairs {
                let (next, c) = gru_forward(x, &h, &p.cell);
                h = next;
                caches.push(c);
            }
            Ok((h, StepCache::Gru(caches)))
        }
        CellKind::Swl => {
            let gates = match mode {
                ComposeMode::Gate => Some((
                    p.gate_input.as_ref().ok_or_else(|| missing("gate_x"))?,
                    p.gate_state.as_ref().ok_or_else(|| missing("gate_h"))?,
                )),
                ComposeMode::Pool => None,
            };
            swl_forward(inputs, &p.cell, gates, mode)
        }
        CellKind::Dwl => {
            let gate = match mode {
                ComposeMode::Gate => Some(p.gate_state.as_ref().ok_or_else(|| missing("gate_h"))?),
                ComposeMode::Pool => None,
            };
            dwl_forward(inputs, &p.cell, gate, mode)
        }
    }
}

fn missing(name: &str) -> Error {
    Error::Config(format!("gate composition requires `{name}` parameters"))
}

/// Gradients with respect to the K inputs and K predecessor states of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepGrads {
    pub dx: Vec<Vec<f64>>,
    pub dh_pre: Vec<Vec<f64>>,
}

/// Backward pass of one cell step for the scalar `⟨upstream, h_t⟩`.
/// Parameter gradients are added into `grads`.
pub fn cell_backward(
    kind: CellKind,
    cache: Option<&StepCache>,
    p: &LatticeCellParams,
    upstream: &[f64],
    grads: &mut LatticeCellParams,
) -> Result<StepGrads> {
    let cache = cache.ok_or_else(|| Error::State("no forward record for this step".into()))?;
    if cache.kind() != kind {
        return Err(Error::State(format!(
            "forward record is for a {} cell, backward requested for {kind}",
            cache.kind()
        )));
    }
    let e = p.cell.input_dim();
    let d = p.cell.hidden_dim();
    if upstream.len() != d {
        return Err(Error::dim("cell_backward upstream", d, upstream.len()));
    }
    match cache {
        StepCache::Gru(steps) => {
            let k = steps.len();
            let mut dx = vec![vec![0.0; e]; k];
            let mut dh_pre = vec![vec![0.0; d]; k];
            let mut dh = upstream.to_vec();
            for (i, c) in steps.iter().enumerate().rev() {
                let mut dprev = vec![0.0; d];
                gru_backward(c, &p.cell, &dh, &mut grads.cell, &mut dx[i], &mut dprev);
                dh = dprev;
            }
            dh_pre[0] = dh;
            Ok(StepGrads { dx, dh_pre })
        }
        StepCache::Swl {
            inputs,
            states,
            gru,
        } => {
            let k = states.count();
            let mut dxc = vec![0.0; e];
            let mut dhc = vec![0.0; d];
            gru_backward(gru, &p.cell, upstream, &mut grads.cell, &mut dxc, &mut dhc);
            let mut dx = vec![vec![0.0; e]; k];
            let mut dh_pre = vec![vec![0.0; d]; k];
            compose_backward(
                inputs,
                p.gate_input.as_ref(),
                &dxc,
                grads.gate_input.as_mut(),
                &mut dx,
            )?;
            compose_backward(
                states,
                p.gate_state.as_ref(),
                &dhc,
                grads.gate_state.as_mut(),
                &mut dh_pre,
            )?;
            Ok(StepGrads { dx, dh_pre })
        }
        StepCache::Dwl { branches, states } => {
            let k = branches.len();
            let mut dbranch = vec![vec![0.0; d]; k];
            compose_backward(
                states,
                p.gate_state.as_ref(),
                upstream,
                grads.gate_state.as_mut(),
                &mut dbranch,
            )?;
            let mut dx = vec![vec![0.0; e]; k];
            let mut dh_pre = vec![vec![0.0; d]; k];
            for (i, c) in branches.iter().enumerate() {
                gru_backward(c, &p.cell, &dbranch[i], &mut grads.cell, &mut dx[i], &mut dh_pre[i]);
            }
            Ok(StepGrads { dx, dh_pre })
        }
    }
}
