use mkis_core::eval::EvalError;
use mkis_core::kv::KvError;
use mkis_core::{DataError, ModelError, TensorError, TrainError};
use thiserror::Error;

/// A failed command, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::GradCheck(_) => 5,
        }
    }
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Geometry { .. } | ModelError::Channels { .. } => CliError::Data(e.to_string()),
            ModelError::Tensor(t) => t.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => {
                CliError::Numerical(e.to_string())
            }
            TrainError::MissingClass { .. } | TrainError::Data(_) | TrainError::Io { .. } => {
                CliError::Data(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Config(_) | TrainError::GradientShape { .. } | TrainError::Checkpoint(_) => {
                CliError::Config(e.to_string())
            }
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Classes(_) => CliError::Config(e.to_string()),
            EvalError::Sample { id, source } => {
                let message = format!("sample {id}: {source}");
                match CliError::from(*source) {
                    CliError::Config(_) => CliError::Config(message),
                    CliError::Numerical(_) => CliError::Numerical(message),
                    _ => CliError::Data(message),
                }
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
