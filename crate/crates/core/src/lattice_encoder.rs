//! Bidirectional lattice encoder.
//!
//! Both directions walk the nodes `v_1..v_N` in ascending order over their own
//! lattice (the backward direction runs on the mirrored lattice). A node with
//! incoming edges gets a state from the configured cell; a node no edge ends at
//! keeps the zero state. The annotation at `v_i` pairs the forward state that has
//! read characters `1..=i` with the backward state that has read `i..=N`, so the
//! backward half of the first annotation summarizes the whole sentence.

use crate::recurrent_cells::{cell_backward, cell_forward, CellKind, ComposeMode, LatticeCellParams, StepCache, StepInputs};
use crate::error::{Error, Result};
use crate::lattice::{reverse, WordLattice};
use crate::numerics::{add_into, Matrix};
use crate::params::{Parameters, Visitor, VisitorMut};
use crate::vocab::Vocab;

/// Source embedding table, one row per vocabulary id.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceEmbeddings {
    pub table: Matrix,
}

impl SourceEmbeddings {
    pub fn dim(&self) -> usize {
        self.table.cols()
    }
}

/// Embedding row for the edge's surface, or the UNK row when it is out of vocabulary.
pub fn embed_edge<'a>(surface: &str, emb: &'a SourceEmbeddings, vocab: &Vocab) -> &'a [f64] {
    emb.table.row(vocab.id(surface))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub kind: CellKind,
    pub mode: ComposeMode,
    pub fwd: LatticeCellParams,
    pub bwd: LatticeCellParams,
}

impl EncoderParams {
    pub fn zeros(kind: CellKind, mode: ComposeMode, input_dim: usize, hidden: usize) -> Self {
        EncoderParams {
            kind,
            mode,
            fwd: LatticeCellParams::zeros(kind, mode, input_dim, hidden),
            bwd: LatticeCellParams::zeros(kind, mode, input_dim, hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.cell.hidden_dim()
    }

    /// Same parameters with the two directions exchanged.
    pub fn swapped(&self) -> Self {
        EncoderParams {
            kind: self.kind,
            mode: self.mode,
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
        }
    }
}

impl Parameters for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, v: &mut Visitor<'_, 'a>) {
        self.bwd.visit(&format!("{prefix}bwd."), v);
        self.fwd.visit(&format!("{prefix}fwd."), v);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, v: &mut VisitorMut<'_, 'a>) {
        self.bwd.visit_mut(&format!("{prefix}bwd."), v);
        self.fwd.visit_mut(&format!("{prefix}fwd."), v);
    }
}

/// One annotation per node `v_1..v_N`, each of width `2d`: the forward state at
/// `v_i` followed by the backward state covering characters `i..=N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotations {
    pub h: Vec<Vec<f64>>,
}

impl Annotations {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.h.first().map_or(0, Vec::len)
    }

    /// Backward-direction half of the annotation at `v_{index+1}`.
    pub fn backward_half(&self, index: usize) -> &[f64] {
        let a = &self.h[index];
        &a[a.len() / 2..]
    }

    pub fn forward_half(&self, index: usize) -> &[f64] {
        let a = &self.h[index];
        &a[..a.len() / 2]
    }
}

/// A lattice with its incoming edges resolved to `(start node, vocab id)`, per node.
#[derive(Clone, Debug)]
pub struct PreparedLattice {
    incoming: Vec<Vec<(usize, usize)>>,
}

impl PreparedLattice {
    pub fn new(lat: &WordLattice, vocab: &Vocab) -> Self {
        Self::with_lookup(lat, |s| vocab.id(s))
    }

    /// A mirrored lattice whose edges still embed as the original words.
    fn mirrored(rev: &WordLattice, vocab: &Vocab) -> Self {
        Self::with_lookup(rev, |s| vocab.id(&s.chars().rev().collect::<String>()))
    }

    fn with_lookup(lat: &WordLattice, id: impl Fn(&str) -> usize) -> Self {
        let mut incoming = vec![Vec::new(); lat.len() + 1];
        // Edges are sorted by start, so each list comes out in ascending start order.
        for e in lat.edges() {
            incoming[e.end].push((e.start, id(&e.surface)));
        }
        PreparedLattice { incoming }
    }

    pub fn len(&self) -> usize {
        self.incoming.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn incoming(&self, node: usize) -> &[(usize, usize)] {
        &self.incoming[node]
    }
}

/// Both directions of a sentence, ready for encoding. The backward direction
/// walks the mirrored lattice but looks each edge up by its original word.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub fwd: PreparedLattice,
    pub bwd: PreparedLattice,
}

impl EncoderInput {
    pub fn new(lat: &WordLattice, vocab: &Vocab) -> Result<Self> {
        Ok(EncoderInput {
            fwd: PreparedLattice::new(lat, vocab),
            bwd: PreparedLattice::mirrored(&reverse(lat)?, vocab),
        })
    }

    pub fn len(&self) -> usize {
        self.fwd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd.is_empty()
    }
}

pub(crate) struct DirectionTape {
    states: Vec<Vec<f64>>,
    steps: Vec<Option<StepCache>>,
}

pub(crate) fn run_direction(
    lat: &PreparedLattice,
    table: &Matrix,
    p: &LatticeCellParams,
    kind: CellKind,
    mode: ComposeMode,
) -> Result<DirectionTape> {
    if table.cols() != p.cell.input_dim() {
        return Err(Error::dim("encoder embedding", p.cell.input_dim(), table.cols()));
    }
    let n = lat.len();
    let d = p.cell.hidden_dim();
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut steps = Vec::with_capacity(n + 1);
    states.push(vec![0.0; d]);
    steps.push(None);
    for t in 1..=n {
        let inc = lat.incoming(t);
        if inc.is_empty() {
            states.push(vec![0.0; d]);
            steps.push(None);
            continue;
        }
        if kind == CellKind::Gru && inc.len() > 1 {
            return Err(Error::Topology {
                node: t,
                incoming: inc.len(),
            });
        }
        for &(_, tok) in inc {
            if tok >= table.rows() {
                return Err(Error::dim("source vocabulary id", table.rows(), tok + 1));
            }
        }
        let inputs = StepInputs::new(
            inc.iter()
                .map(|&(start, tok)| (table.row(tok), states[start].as_slice()))
                .collect(),
        );
        let (h, cache) = cell_forward(kind, mode, &inputs, p)?;
        states.push(h);
        steps.push(Some(cache));
    }
    Ok(DirectionTape { states, steps })
}

/// Adds gradients for one direction given `dstates[t]` for every node.
pub(crate) fn backprop_direction(
    lat: &PreparedLattice,
    tape: &DirectionTape,
    p: &LatticeCellParams,
    kind: CellKind,
    mut dstates: Vec<Vec<f64>>,
    grads: &mut LatticeCellParams,
    grad_table: &mut Matrix,
) -> Result<()> {
    for t in (1..=lat.len()).rev() {
        let Some(cache) = tape.steps[t].as_ref() else {
            continue;
        };
        if dstates[t].iter().all(|v| *v == 0.0) {
            continue;
        }
        let g = cell_backward(kind, Some(cache), p, &dstates[t], grads)?;
        for (k, &(start, tok)) in lat.incoming(t).iter().enumerate() {
            add_into(&g.dx[k], grad_table.row_mut(tok));
            add_into(&g.dh_pre[k], &mut dstates[start]);
        }
    }
    Ok(())
}

/// Node states `state[0..=N]` of a single left-to-right pass.
pub fn encode_forward(
    lat: &WordLattice,
    emb: &SourceEmbeddings,
    vocab: &Vocab,
    p: &LatticeCellParams,
    kind: CellKind,
    mode: ComposeMode,
) -> Result<Vec<Vec<f64>>> {
    let prepared = PreparedLattice::new(lat, vocab);
    Ok(run_direction(&prepared, &emb.table, p, kind, mode)?.states)
}

pub(crate) struct EncoderTape {
    fwd: DirectionTape,
    bwd: DirectionTape,
}

pub(crate) fn encode_with_tape(
    input: &EncoderInput,
    table: &Matrix,
    ep: &EncoderParams,
) -> Result<(Annotations, EncoderTape)> {
    let fwd = run_direction(&input.fwd, table, &ep.fwd, ep.kind, ep.mode)?;
    let bwd = run_direction(&input.bwd, table, &ep.bwd, ep.kind, ep.mode)?;
    let n = input.len();
    let h = (1..=n)
        .map(|i| {
            let mut a = fwd.states[i].clone();
            a.extend_from_slice(&bwd.states[n + 1 - i]);
            a
        })
        .collect();
    Ok((Annotations { h }, EncoderTape { fwd, bwd }))
}

/// Backpropagates annotation gradients (`dann[i]` for node `v_{i+1}`) into the
/// encoder parameters and the embedding table.
pub(crate) fn encoder_backward(
    input: &EncoderInput,
    tape: &EncoderTape,
    ep: &EncoderParams,
    dann: &[Vec<f64>],
    grads: &mut EncoderParams,
    grad_table: &mut Matrix,
) -> Result<()> {
    let n = input.len();
    let d = ep.hidden_dim();
    let mut df = vec![vec![0.0; d]; n + 1];
    let mut db = vec![vec![0.0; d]; n + 1];
    for i in 1..=n {
        df[i].copy_from_slice(&dann[i - 1][..d]);
        db[n + 1 - i].copy_from_slice(&dann[i - 1][d..]);
    }
    backprop_direction(&input.fwd, &tape.fwd, &ep.fwd, ep.kind, df, &mut grads.fwd, grad_table)?;
    backprop_direction(&input.bwd, &tape.bwd, &ep.bwd, ep.kind, db, &mut grads.bwd, grad_table)?;
    Ok(())
}

pub fn encode_bidirectional(
    lat: &WordLattice,
    emb: &SourceEmbeddings,
    vocab: &Vocab,
    ep: &EncoderParams,
) -> Result<Annotations> {
    let input = EncoderInput::new(lat, vocab)?;
    Ok(encode_with_tape(&input, &emb.table, ep)?.0)
}

/// Encodes a prepared input without keeping the backward record.
pub fn encode_prepared(input: &EncoderInput, emb: &SourceEmbeddings, ep: &EncoderParams) -> Result<Annotations> {
    Ok(encode_with_tape(input, &emb.table, ep)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_lattice, CharSeq, Tokenization};
    use crate::scalar_oracle as oracle;
    use crate::vocab::{build_vocab, UNK};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const KINDS: [(CellKind, ComposeMode); 5] = [
        (CellKind::Gru, ComposeMode::Pool),
        (CellKind::Swl, ComposeMode::Pool),
        (CellKind::Swl, ComposeMode::Gate),
        (CellKind::Dwl, ComposeMode::Pool),
        (CellKind::Dwl, ComposeMode::Gate),
    ];

    fn abcd() -> WordLattice {
        build_lattice(
            &CharSeq::new("abcd").unwrap(),
            &[
                Tokenization::new(["ab", "cd"]),
                Tokenization::new(["a", "bcd"]),
                Tokenization::new(["ab", "c", "d"]),
            ],
        )
        .unwrap()
    }

    fn random_tokenization(chars: &[char], rng: &mut ChaCha8Rng) -> Tokenization {
        let mut toks = Vec::new();
        let mut cur = String::new();
        for (i, c) in chars.iter().enumerate() {
            cur.push(*c);
            if i + 1 == chars.len() || rng.gen_bool(0.4) {
                toks.push(std::mem::take(&mut cur));
            }
        }
        Tokenization::new(toks)
    }

    fn random_lattice(rng: &mut ChaCha8Rng, max_len: usize, segmenters: usize) -> WordLattice {
        let n = rng.gen_range(1..=max_len);
        let chars: Vec<char> = (0..n).map(|_| (b'a' + rng.gen_range(0..4u8)) as char).collect();
        let toks: Vec<Tokenization> = (0..segmenters).map(|_| random_tokenization(&chars, rng)).collect();
        build_lattice(&CharSeq::from_chars(chars).unwrap(), &toks).unwrap()
    }

    fn vocab_for(lats: &[&WordLattice]) -> Vocab {
        build_vocab(lats.iter().flat_map(|l| l.edges().iter().map(|e| e.surface.clone())), 1000).unwrap()
    }

    fn random_model(kind: CellKind, mode: ComposeMode, vocab: &Vocab, e: usize, d: usize, seed: u64) -> (SourceEmbeddings, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut emb = SourceEmbeddings {
            table: Matrix::zeros(vocab.len(), e),
        };
        let mut ep = EncoderParams::zeros(kind, mode, e, d);
        emb.table.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        ep.visit_mut("", &mut |_, m| m.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0)));
        (emb, ep)
    }

    fn bits(a: &Annotations) -> Vec<u64> {
        a.h.iter().flatten().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn seeded_abcd_states_match_oracle_walk() {
        let lat = abcd();
        let vocab = vocab_for(&[&lat]);
        let config = crate::model::ModelConfig {
            src_vocab: vocab.len(),
            tgt_vocab: 4,
            embed_dim: 3,
            hidden: 3,
            cell: CellKind::Dwl,
            compose: ComposeMode::Gate,
        };
        let model = crate::model::ModelParams::init(config, 42);
        let emb = model.src_embed;
        let mut p = model.enc.fwd;
        // Nonzero gates so the composition weights are not uniform.
        p.gate_state = Some(crate::recurrent_cells::ComposeParams::new(vec![0.9, -0.6, 0.3], 0.2));

        let states = encode_forward(&lat, &emb, &vocab, &p, CellKind::Dwl, ComposeMode::Gate).unwrap();
        let mut walk = vec![vec![0.0; 3]; 5];
        for t in 1..=4 {
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = lat
                .edges()
                .iter()
                .filter(|e| e.end == t)
                .map(|e| (emb.table.row(vocab.id(&e.surface)).to_vec(), walk[e.start].clone()))
                .collect();
            if !pairs.is_empty() {
                walk[t] = oracle::dwl(&p.cell, &pairs, ComposeMode::Gate, p.gate_state.as_ref());
            }
        }
        let frozen = [
            [0.0, 0.0, 0.0],
            [0.02159683941133823, -0.006304135118569433, 0.03102505254782762],
            [0.016022659183300706, -0.0288437321351477, -0.005217153671026424],
            [-0.007920293944270029, 0.0166149713353542, 0.035883176433078874],
            [0.0034726393717331803, -0.012104183788495971, 0.021575879789430305],
        ];
        for t in 0..=4 {
            for k in 0..3 {
                assert!((states[t][k] - walk[t][k]).abs() <= 1e-14, "node {t}");
                assert!((walk[t][k] - frozen[t][k]).abs() <= 1e-14, "node {t} frozen");
            }
        }
    }

    #[test]
    fn annotation_shapes() {
        let lat = abcd();
        let vocab = vocab_for(&[&lat]);
        for (kind, mode) in KINDS.into_iter().skip(1) {
            let (emb, ep) = random_model(kind, mode, &vocab, 3, 5, 1);
            let a = encode_bidirectional(&lat, &emb, &vocab, &ep).unwrap();
            assert_eq!(a.len(), 4);
            assert!(a.h.iter().all(|h| h.len() == 10));
        }
        let one = build_lattice(&CharSeq::new("x").unwrap(), &[Tokenization::new(["x"])]).unwrap();
        let (emb, ep) = random_model(CellKind::Gru, ComposeMode::Pool, &vocab, 3, 5, 1);
        let a = encode_bidirectional(&one, &emb, &vocab, &ep).unwrap();
        assert_eq!((a.len(), a.dim()), (1, 10));
    }

    #[test]
    fn oov_edges_use_the_unk_row() {
        let lat = abcd();
        let vocab = vocab_for(&[&lat]);
        let (emb, _) = random_model(CellKind::Gru, ComposeMode::Pool, &vocab, 3, 2, 4);
        assert_eq!(embed_edge("zzz", &emb, &vocab), emb.table.row(UNK));
        let id = vocab.id("bcd");
        assert_eq!(embed_edge("bcd", &emb, &vocab), emb.table.row(id));
    }

    #[test]
    fn gru_rejects_branching_lattices() {
        let lat = abcd();
        let vocab = vocab_for(&[&lat]);
        let (emb, ep) = random_model(CellKind::Gru, ComposeMode::Pool, &vocab, 3, 2, 4);
        assert!(matches!(
            encode_bidirectional(&lat, &emb, &vocab, &ep),
            Err(Error::Topology { .. })
        ));
    }

    #[test]
    fn chain_matches_sequential_gru() {
        let chars = CharSeq::new("abcdef").unwrap();
        let tok = Tokenization::new(["ab", "c", "def"]);
        let lat = build_lattice(&chars, &[tok.clone()]).unwrap();
        let vocab = vocab_for(&[&lat]);
        let (emb, ep) = random_model(CellKind::Gru, ComposeMode::Pool, &vocab, 3, 4, 2);
        let states = encode_forward(&lat, &emb, &vocab, &ep.fwd, CellKind::Gru, ComposeMode::Pool).unwrap();
        let mut h = vec![0.0; 4];
        let mut end = 0;
        for t in &tok.tokens {
            h = oracle::gru(&ep.fwd.cell, emb.table.row(vocab.id(t)), &h);
            end += t.chars().count();
            assert!(states[end].iter().zip(&h).all(|(a, b)| (a - b).abs() <= 1e-14));
        }
        // Word-interior nodes carry no state.
        assert!(states[1].iter().chain(&states[4]).chain(&states[5]).all(|v| *v == 0.0));
    }

    #[test]
    fn chains_collapse_across_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..50 {
            let lat = random_lattice(&mut rng, 20, 1);
            let vocab = vocab_for(&[&lat]);
            let (emb, base) = random_model(CellKind::Dwl, ComposeMode::Gate, &vocab, 3, 4, case);
            let mut reference = None;
            for (kind, mode) in KINDS {
                let mut ep = EncoderParams::zeros(kind, mode, 3, 4);
                ep.fwd.cell = base.fwd.cell.clone();
                ep.bwd.cell = base.bwd.cell.clone();
                if let Some(g) = ep.fwd.gate_input.as_mut() {
                    g.u_g.as_mut_slice().iter_mut().for_each(|v| *v = 0.7);
                }
                let got = bits(&encode_bidirectional(&lat, &emb, &vocab, &ep).unwrap());
                assert_eq!(reference.get_or_insert_with(|| got.clone()), &got, "{kind} {mode}");
            }
        }
    }

    #[test]
    fn reverse_mirrors_annotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for case in 0..60 {
            let lat = random_lattice(&mut rng, 12, 3);
            let rev = reverse(&lat).unwrap();
            let vocab = vocab_for(&[&lat]);
            // Same ids for each word spelled backwards.
            let mirrored = Vocab::from_ranked(vocab.tokens()[3..].iter().map(|t| t.chars().rev().collect::<String>())).unwrap();
            for (kind, mode) in KINDS.into_iter().skip(1) {
                let (emb, ep) = random_model(kind, mode, &vocab, 2, 3, case);
                let a = encode_bidirectional(&lat, &emb, &vocab, &ep).unwrap();
                let b = encode_bidirectional(&rev, &emb, &mirrored, &ep.swapped()).unwrap();
                let n = a.len();
                for i in 0..n {
                    let m = n - 1 - i;
                    assert_eq!(a.forward_half(i), b.backward_half(m));
                    assert_eq!(a.backward_half(i), b.forward_half(m));
                }
            }
        }
    }

    #[test]
    fn annotations_are_bounded_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for case in 0..40 {
            let lat = random_lattice(&mut rng, 15, 3);
            let vocab = vocab_for(&[&lat]);
            for (kind, mode) in KINDS.into_iter().skip(1) {
                let (emb, mut ep) = random_model(kind, mode, &vocab, 3, 3, case);
                ep.visit_mut("", &mut |_, m| m.as_mut_slice().iter_mut().for_each(|v| *v *= 3.0));
                let a = encode_bidirectional(&lat, &emb, &vocab, &ep).unwrap();
                assert!(a.h.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
                assert_eq!(bits(&a), bits(&encode_bidirectional(&lat, &emb, &vocab, &ep).unwrap()));
            }
        }
    }

    #[test]
    fn backward_half_of_first_annotation_reads_whole_sentence() {
        // Changing the last character's word changes the backward state at v_1.
        let a_lat = build_lattice(&CharSeq::new("abc").unwrap(), &[Tokenization::new(["a", "bc"])]).unwrap();
        let b_lat = build_lattice(&CharSeq::new("abd").unwrap(), &[Tokenization::new(["a", "bd"])]).unwrap();
        let vocab = vocab_for(&[&a_lat, &b_lat]);
        let (emb, ep) = random_model(CellKind::Dwl, ComposeMode::Pool, &vocab, 3, 3, 5);
        let a = encode_bidirectional(&a_lat, &emb, &vocab, &ep).unwrap();
        let b = encode_bidirectional(&b_lat, &emb, &vocab, &ep).unwrap();
        assert_ne!(a.backward_half(0), b.backward_half(0));
        assert_eq!(a.forward_half(0), b.forward_half(0));
    }
}

