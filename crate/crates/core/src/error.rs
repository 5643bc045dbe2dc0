use std::path::PathBuf;

/// Errors raised anywhere in the simulation, extraction and modelling stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grade {0}: expected 0, 1 or 2")]
    InvalidGrade(u8),
    #[error("geometry overflow: {0}")]
    GeometryOverflow(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate ROI: {0}")]
    DegenerateRoi(String),
    #[error("cohort spec: {0}")]
    Spec(String),
    #[error("split: {0}")]
    Split(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Training(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("AUC undefined: {0}")]
    AucUndefined(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
