use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite state at grid index {index}")]
    Explosion { index: i64 },

    #[error("pull-back did not converge for seeds {seeds:?}")]
    NotConverged { seeds: Vec<u64> },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty measure")]
    EmptyMeasure,

    #[error("time step {dt} violates the stability bound {bound}")]
    Stability { dt: f64, bound: f64 },

    #[error("mass drift {drift:e} at step {step} exceeds tolerance")]
    MassDrift { step: usize, drift: f64 },

    #[error("config error at `{path}`{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        path: String,
        line: Option<usize>,
        message: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("parse error in {source_name} line {line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
