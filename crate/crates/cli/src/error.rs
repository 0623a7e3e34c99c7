use std::fmt;
use std::path::Path;

use battformer::config::ConfigError;
use battformer::data::DataError;
use battformer::model::ModelError;
use battformer::train::TrainError;

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_ALL_FAILED: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or input; exit code 1.
    Validation(String),
    /// Failure while doing the work; exit code 2.
    Runtime(String),
    /// Every grid cell failed; exit code 3.
    AllCellsFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::AllCellsFailed(_) => EXIT_ALL_FAILED,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
            CliError::AllCellsFailed(n) => write!(f, "all {n} grid cells failed"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let inner = match &e {
            DataError::InFile { source, .. } => source.as_ref(),
            other => other,
        };
        match inner {
            DataError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io { .. } => CliError::Runtime(e.to_string()),
            ModelError::InvalidSpec(_) | ModelError::Checkpoint(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Incompatible(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
