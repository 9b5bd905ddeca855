use std::path::Path;

use capsgan_core::datasets::DataError;
use capsgan_core::evaluation::EvalError;
use capsgan_core::gan::CheckpointError;
use capsgan_core::GanError;
use thiserror::Error;

/// Failures grouped by exit code: 1 validation, 2 runtime, 3 I/O.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn context(self, what: &str) -> Self {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{what}: {m}")),
        }
    }
}

impl From<GanError> for CliError {
    fn from(e: GanError) -> Self {
        match e {
            GanError::Divergence { .. } | GanError::Tensor(_) => CliError::Runtime(e.to_string()),
            GanError::Data(d) => d.into(),
            GanError::Config(_)
            | GanError::Budget { .. }
            | GanError::ZeroSteps
            | GanError::ImageShape { .. } => CliError::Validation(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Spec(_) | DataError::Separation { .. } | DataError::BatchSize { .. } => {
                CliError::Validation(e.to_string())
            }
            // unreadable or malformed input files
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::VariantMismatch { .. } | CheckpointError::ConfigMismatch => {
                CliError::Validation(e.to_string())
            }
            CheckpointError::Model(g) => g.into(),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Gan(g) => g.into(),
            EvalError::Data(d) => d.into(),
            EvalError::DegenerateBattle { .. } | EvalError::Tensor(_) => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}
