use thiserror::Error;

/// Errors raised by the grid, cost, transport and simulation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("grid has no positive mass (total = {0})")]
    ZeroMass(f64),

    #[error("smoothing kernel must be odd and >= 1, got {0}")]
    BadKernel(usize),

    #[error("invalid smoothing sigma {0}")]
    BadSigma(f64),

    #[error("relation {0} has no directional target")]
    BadRelation(&'static str),

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("sinkhorn did not converge after {iterations} iterations (marginal error {marginal_err:e})")]
    NotConverged { iterations: usize, marginal_err: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("brute-force assignment limited to n <= 8, got {0}")]
    TooLarge(usize),

    #[error("no token pairs to optimize")]
    EmptyPairs,

    #[error("step {step} is outside the optimization window [0, {end})")]
    OutOfWindow { step: usize, end: usize },

    #[error("invalid window ({start}, {end}) for {total} steps")]
    BadWindow { start: usize, end: usize, total: usize },

    #[error("group of size {size} cannot be scored at n = {n}")]
    BadGroupSize { size: usize, n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_mismatch(left: impl Into<String>, right: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        left: left.into(),
        right: right.into(),
    }
}
