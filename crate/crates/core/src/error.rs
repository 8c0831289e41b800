use std::path::PathBuf;

use thiserror::Error;

use crate::lattice::Violation;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("tokenization {index} does not concatenate to the character sequence")]
    Mismatch { index: usize },

    #[error("invalid lattice: {}", format_violations(.0))]
    InvalidLattice(Vec<Violation>),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("node {node} has {incoming} incoming edges; the plain GRU needs a chain lattice")]
    Topology { node: usize, incoming: usize },

    #[error("missing forward intermediates: {0}")]
    State(String),

    #[error("shape mismatch for tensor `{name}`: {reason}")]
    Shape { name: String, reason: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{which} vocabulary fingerprint does not match the checkpoint")]
    Fingerprint { which: &'static str },

    #[error("invalid toy task: {0}")]
    Spec(String),

    #[error("{hyp_lines} hypothesis lines vs {ref_lines} reference lines")]
    LengthMismatch { hyp_lines: usize, ref_lines: usize },

    #[error("{file}:{line}: {reason}")]
    Data {
        file: String,
        line: usize,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension { op, expected, got }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
