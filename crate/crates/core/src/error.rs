use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bearing is undefined between coincident points")]
    CoincidentPoints,

    #[error("invalid geolocation (lat {lat}, lon {lon})")]
    InvalidLocation { lat: f64, lon: f64 },

    #[error("invalid size for {what}: {value}")]
    InvalidSize { what: &'static str, value: usize },

    #[error("location maps to pixel (row {row:.3}, col {col:.3}) outside a {size}px frame")]
    OutOfFootprint { row: f64, col: f64, size: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("camera at ({east:.2} m E, {north:.2} m N) is inside scene geometry")]
    CameraInsideGeometry { east: f64, north: f64 },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {path} ({context})")]
    MissingFile { path: PathBuf, context: String },

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: schema error in record '{id}': {msg}")]
    Schema {
        path: PathBuf,
        line: usize,
        id: String,
        msg: String,
    },

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("non-finite loss in batch {batch_id}")]
    NonFiniteLoss { batch_id: u64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("no feature extractor supplied: {0}")]
    MissingExtractor(String),

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
