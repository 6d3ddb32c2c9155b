use std::path::PathBuf;

use protoguide_data::DataError;
use protoguide_model::ModelError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 usage or configuration, 2 input data, 3 anything that failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.into().display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<protoguide_core::Error> for CliError {
    fn from(e: protoguide_core::Error) -> Self {
        use protoguide_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::InvalidSchedule(_) | E::DimensionMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            E::EmptyClass(_) | E::UnknownClass(_) | E::EmptyBatch | E::ClassMapMismatch(_) => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Core(inner) => inner.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<protoguide_core::prototype::LoadError> for CliError {
    fn from(e: protoguide_core::prototype::LoadError) -> Self {
        CliError::Runtime(format!("cannot load codebook: {e}"))
    }
}
