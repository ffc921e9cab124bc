use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("velocity is undefined at the clean endpoint (tau = 0)")]
    Singularity,

    #[error("euler step must move toward lower noise: from {from} to {to}")]
    StepDirection { from: f64, to: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid world: {0}")]
    InvalidWorld(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("degenerate embedding at frame {frame}")]
    DegenerateEmbedding { frame: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config parse error at line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("invalid value for `{key}`: {message}")]
    Semantic { key: String, message: String },

    #[error("mismatched manifests: {0}")]
    Mismatch(String),

    #[error("scenario `{scenario}`, seed index {index}: {source}")]
    Run {
        scenario: String,
        index: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
