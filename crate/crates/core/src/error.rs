use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("log of negative value {0}")]
    LogOfNegative(f64),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {node} references input {input} that does not precede it")]
    CyclicTape { node: usize, input: usize },
    #[error("unknown tape node {0}")]
    UnknownNode(usize),
    #[error("loss function is not deterministic: {first} then {second}")]
    Nondeterministic { first: f64, second: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("row {row} is not on the simplex (sum {sum})")]
    NotOnSimplex { row: usize, sum: f64 },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("series has zero variance")]
    ZeroVariance,
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        norms: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
