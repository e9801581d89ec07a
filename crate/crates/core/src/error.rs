//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("Niggli reduction did not converge within {0} iterations")]
    ReductionFailure(usize),

    #[error("invalid crystal: {0}")]
    InvalidCrystal(String),

    #[error("inconsistent symmetry: {0}")]
    InconsistentSymmetry(String),

    #[error("unsupported element Z={0}")]
    UnsupportedElement(u8),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("sequence length {n} exceeds model maximum {max}")]
    SequenceTooLong { n: usize, max: usize },

    #[error("numeric failure in {context}: {detail}")]
    NumericFailure { context: String, detail: String },

    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: validation error: {msg}")]
    Validation { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
