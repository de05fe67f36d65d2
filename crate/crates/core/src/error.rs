use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel spec: {0}")]
    InvalidKernel(String),

    #[error("dimension must be positive, got {0}")]
    NonPositiveDimension(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("feature space mismatch: expected `{expected}`, got `{found}`")]
    SpaceMismatch { expected: String, found: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid window parameters: window={window}, history={history}")]
    InvalidWindow { window: usize, history: usize },

    #[error("malformed trajectory record at line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("inconsistent risk arity at line {line}: expected {expected}, found {found}")]
    RiskArity {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("ridge parameter must be positive, got {0}")]
    NonPositiveRidge(f64),

    #[error("linear solve failed for a {dim}x{dim} system (diag range [{min_diag:.3e}, {max_diag:.3e}], ridge {ridge:.3e})")]
    Solve {
        dim: usize,
        min_diag: f64,
        max_diag: f64,
        ridge: f64,
    },

    #[error("domain dimension {dim} exceeds the configured cap {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("enumeration of {count} paths exceeds the configured cap {cap}")]
    EnumerationCap { count: u128, cap: u128 },

    #[error("singular innovation covariance at step {0}")]
    SingularInnovation(usize),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("monte carlo sample count must be at least 1")]
    NoSamples,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("environment `{0}` has no exact oracle")]
    NoOracle(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
