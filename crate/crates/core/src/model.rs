//! Full translation model: source embeddings, bidirectional lattice encoder, decoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention_decoder::{beam_decode, DecoderDims, DecoderParams};
use crate::error::Result;
use crate::lattice::WordLattice;
use crate::lattice_encoder::{encode_prepared, EncoderInput, EncoderParams, SourceEmbeddings};
use crate::numerics::Matrix;
use crate::params::{Parameters, Visitor, VisitorMut};
use crate::recurrent_cells::{CellKind, ComposeMode};
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub cell: CellKind,
    pub compose: ComposeMode,
}

impl ModelConfig {
    pub fn decoder_dims(&self) -> DecoderDims {
        DecoderDims {
            tgt_vocab: self.tgt_vocab,
            embed: self.embed_dim,
            hidden: self.hidden,
            enc_hidden: self.hidden,
            attention: self.hidden,
            readout: self.embed_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub src_embed: SourceEmbeddings,
    pub enc: EncoderParams,
    pub dec: DecoderParams,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        ModelParams {
            config,
            src_embed: SourceEmbeddings {
                table: Matrix::zeros(config.src_vocab, config.embed_dim),
            },
            enc: EncoderParams::zeros(config.cell, config.compose, config.embed_dim, config.hidden),
            dec: DecoderParams::zeros(config.decoder_dims()),
        }
    }

    /// Seeded initialization; see [`init_parameters`].
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut p = ModelParams::zeros(config);
        init_parameters(&mut p, seed);
        p
    }

    /// Beam-search translation of one prepared source; width 1 is greedy.
    pub fn translate_prepared(
        &self,
        input: &EncoderInput,
        beam: usize,
        max_len: usize,
        length_norm: bool,
    ) -> Result<Vec<usize>> {
        let ann = encode_prepared(input, &self.src_embed, &self.enc)?;
        beam_decode(&ann, &self.dec, max_len, beam, length_norm)
    }

    pub fn translate(
        &self,
        lat: &WordLattice,
        src_vocab: &Vocab,
        beam: usize,
        max_len: usize,
        length_norm: bool,
    ) -> Result<Vec<usize>> {
        self.translate_prepared(&EncoderInput::new(lat, src_vocab)?, beam, max_len, length_norm)
    }
}

/// Fills every tensor in name order from a ChaCha8 stream: embedding tables
/// uniform in `[-0.1, 0.1]`, composition gates left at zero, every other matrix
/// Glorot-uniform in `±sqrt(6 / (rows + cols))`.
pub fn init_parameters<P: Parameters + ?Sized>(p: &mut P, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, m) in p.named_mut() {
        if name.contains("gate_") {
            m.fill(0.0);
            continue;
        }
        let leaf = name.rsplit('.').next().unwrap_or("");
        let scale = if leaf == "embed" {
            0.1
        } else {
            (6.0 / (m.rows() + m.cols()) as f64).sqrt()
        };
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-scale..=scale);
        }
    }
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, prefix: &str, v: &mut Visitor<'_, 'a>) {
        self.dec.visit(&format!("{prefix}dec."), v);
        self.enc.visit(&format!("{prefix}enc."), v);
        v(format!("{prefix}src.embed"), &self.src_embed.table);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, v: &mut VisitorMut<'_, 'a>) {
        self.dec.visit_mut(&format!("{prefix}dec."), v);
        self.enc.visit_mut(&format!("{prefix}enc."), v);
        v(format!("{prefix}src.embed"), &mut self.src_embed.table);
    }
}
