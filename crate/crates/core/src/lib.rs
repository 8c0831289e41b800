//! Word-lattice encoders and an attention decoder for neural machine translation.
//!
//! The source sentence is a [`lattice::WordLattice`] built by merging several
//! tokenizations. A bidirectional recurrent encoder walks the lattice with one
//! of three cells ([`recurrent_cells::CellKind`]) and the decoder attends over
//! the per-character annotations. Everything is trained end to end with exact
//! hand-written gradients ([`training`]).

pub mod attention_decoder;
pub mod corpus;
pub mod error;
pub mod lattice;
pub mod lattice_encoder;
pub mod model;
pub mod numerics;
pub mod params;
pub mod recurrent_cells;
#[cfg(test)]
mod scalar_oracle;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use lattice::{build_lattice, read_lattices, reverse, validate, write_lattices, CharSeq, LatticeEdge, Tokenization, WordLattice};
pub use model::{init_parameters, ModelConfig, ModelParams};
pub use params::{ParameterStore, Parameters};
pub use recurrent_cells::{CellKind, ComposeMode};
pub use vocab::{build_vocab, Vocab, BOS, EOS, UNK};
