use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: cannot decode image: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),

    #[error("dataset root {0} has no class directories")]
    NoClasses(PathBuf),

    #[error("class {0:?} has no images")]
    EmptyClass(String),

    #[error("class {class:?} has {found} images, need {needed}")]
    InsufficientImages { class: String, found: usize, needed: usize },

    #[error("encoder failed on {path}: {message}")]
    Encoder { path: PathBuf, message: String },

    #[error("embedding cache holds {cached}-d vectors but the encoder produces {encoder}-d")]
    CacheDimMismatch { cached: usize, encoder: usize },

    #[error("{} image(s) missing, first: {}", .0.len(), .0.first().map(|p| p.display().to_string()).unwrap_or_default())]
    MissingImages(Vec<PathBuf>),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid annotation data: {0}")]
    Annotation(String),

    #[error(transparent)]
    Core(#[from] protoguide_core::Error),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        DataError::Json { path: path.into(), source }
    }
}

/// Reads and parses a JSON file, attributing errors to its path.
pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::json(path, e))
}

/// Pretty JSON with a trailing newline, written atomically.
pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| DataError::json(path, e))?;
    bytes.push(b'\n');
    protoguide_core::fsutil::write_atomic(path, &bytes).map_err(|e| DataError::io(path, e))
}
