use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },

    #[error("step {step} out of range 0..={max}")]
    Index { step: usize, max: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },

    #[error("width mismatch: network expects {expected} inputs, got {got}")]
    Width { expected: usize, got: usize },

    #[error("target step {s} must precede source step {t}")]
    Ordering { t: usize, s: usize },

    #[error("clean-image extraction is singular for the pair (t={t}, s={s})")]
    DegeneratePair { t: usize, s: usize },

    #[error("residual noise is undefined at step {0} (sigma = 0)")]
    SingularStep(usize),

    #[error("activation cache is stale: parameters changed since the forward pass")]
    StaleCache,

    #[error("loss term `{term}` is not finite ({value})")]
    NonFinite { term: &'static str, value: f64 },

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: u64 },

    #[error("image too small: {height}x{width} is below the {window}x{window} window")]
    TooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            field,
            reason: reason.into(),
        }
    }
}
