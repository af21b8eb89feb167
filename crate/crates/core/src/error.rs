use thiserror::Error;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(
        "symmetric eigensolver did not converge (n = {n}, frobenius norm = {frobenius:.3e}, max asymmetry = {asymmetry:.3e})"
    )]
    EigenConvergence {
        n: usize,
        frobenius: f64,
        asymmetry: f64,
    },

    #[error("filter order mismatch: expected {expected}, got {actual}")]
    OrderMismatch { expected: usize, actual: usize },

    #[error("empty frequency range [{lo}, {hi}]")]
    EmptyRange { lo: f64, hi: f64 },

    #[error("backward pass called without a matching forward cache")]
    MissingCache,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("non-finite prediction at rollout step {step}")]
    NonFinitePrediction { step: usize },

    #[error("agents {i} and {j} coincide")]
    CoincidentAgents { i: usize, j: usize },

    #[error("could not place {agents} agents collision-free after {attempts} attempts")]
    InitRetryExceeded { agents: usize, attempts: usize },

    #[error("degenerate least-squares fit: {0}")]
    DegenerateFit(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(
    context: &'static str,
    expected: impl ToString,
    actual: impl ToString,
) -> Error {
    Error::DimensionMismatch {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
