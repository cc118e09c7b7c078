//! Maps library errors onto the exit-code contract: 1 usage, 2 data or
//! validation, 3 numerical failure.

use lowprec::data::DataError;
use lowprec::modelio::ModelIoError;
use lowprec::profiler::ProfileError;
use lowprec::training::TrainError;
use lowprec::{FixedPointError, InferenceError, NetError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn classify(numeric: bool, e: impl std::fmt::Display) -> Self {
        if numeric {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

fn fixed_numeric(e: &FixedPointError) -> bool {
    matches!(e, FixedPointError::NonFinite { .. } | FixedPointError::NonFiniteElement { .. })
}

fn tensor_numeric(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. })
}

fn inference_numeric(e: &InferenceError) -> bool {
    match e {
        InferenceError::NonFinite { .. } => true,
        InferenceError::Tensor(t) => tensor_numeric(t),
        InferenceError::FixedPoint(f) => fixed_numeric(f),
        _ => false,
    }
}

fn train_numeric(e: &TrainError) -> bool {
    match e {
        TrainError::NonFiniteGradient { .. } | TrainError::Diverged { .. } => true,
        TrainError::Inference(i) => inference_numeric(i),
        TrainError::FixedPoint(f) => fixed_numeric(f),
        _ => false,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::classify(train_numeric(&e), e)
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        Self::classify(inference_numeric(&e), e)
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        let numeric = match &e {
            ProfileError::Bits(_) | ProfileError::Threshold(_) => return CliError::Usage(e.to_string()),
            ProfileError::Inference(i) => inference_numeric(i),
            ProfileError::Train(t) => train_numeric(t),
            ProfileError::FixedPoint(f) => fixed_numeric(f),
            _ => false,
        };
        Self::classify(numeric, e)
    }
}

impl From<ModelIoError> for CliError {
    fn from(e: ModelIoError) -> Self {
        let numeric = match &e {
            ModelIoError::Inference(i) => inference_numeric(i),
            ModelIoError::Code { source, .. } => fixed_numeric(source),
            _ => false,
        };
        Self::classify(numeric, e)
    }
}

impl From<FixedPointError> for CliError {
    fn from(e: FixedPointError) -> Self {
        Self::classify(fixed_numeric(&e), e)
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
