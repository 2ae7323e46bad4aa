use std::path::PathBuf;

/// Errors produced anywhere in the labeling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("prompt #{index} at ({x}, {y}) is outside the {width}x{height} image")]
    Coordinate {
        index: usize,
        x: i64,
        y: i64,
        width: usize,
        height: usize,
    },

    #[error("duplicate prompt at ({x}, {y})")]
    DuplicatePrompt { x: u32, y: u32 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("parse error in {path} at `{location}`: {detail}")]
    Parse {
        path: PathBuf,
        location: String,
        detail: String,
    },

    #[error("transport error talking to {endpoint} after {attempts} attempt(s): {detail}")]
    Transport {
        endpoint: String,
        attempts: u32,
        detail: String,
    },

    #[error("backend contract violation: {0}")]
    Contract(String),
}

impl ForgeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ForgeError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        ForgeError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = ForgeError> = std::result::Result<T, E>;
