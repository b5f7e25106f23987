use thiserror::Error;

pub type Result<T> = std::result::Result<T, CgfmError>;

#[derive(Debug, Error)]
pub enum CgfmError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    Shape {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("no auxiliary prediction for window {window}")]
    MissingAux { window: usize },

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("non-finite sampler state at step {step} (t = {t})")]
    NonFiniteState { step: usize, t: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported parameter file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error at row {row}, column {column:?}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dimension mismatch: expected width {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("alignment error: expected {expected} rows, found {found}")]
    Alignment { expected: usize, found: usize },

    #[error("series too short: {segment} segment has {found} rows but needs {needed}; total length must be at least {min_total}")]
    Sizing {
        segment: &'static str,
        found: usize,
        needed: usize,
        min_total: usize,
    },

    #[error("channel {0:?} is constant on the training segment")]
    ConstantChannel(String),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("posterior weights underflowed at x = {x}, t = {t}")]
    Underflow { x: f64, t: f64 },

    #[error("enumeration budget exceeded: {needed} combinations > {budget}")]
    Budget { needed: usize, budget: usize },

    #[error("report fingerprints differ: {0}")]
    Fingerprint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
