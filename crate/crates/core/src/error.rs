use std::path::PathBuf;

/// Errors raised anywhere in the perception pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("gradient is degenerate at {0:?}")]
    DegeneratePoint([f64; 3]),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate contact normal")]
    DegenerateNormal,

    #[error("every point is behind the camera")]
    EmptyRender,

    #[error("expected a {expected}x{expected} image, got {rows}x{cols}")]
    ImageSize { expected: usize, rows: usize, cols: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
