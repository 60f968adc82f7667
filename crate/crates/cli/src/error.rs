use std::process::ExitCode;

use belle::backbone::BackboneError;
use belle::config::ConfigError;
use belle::corpus::CorpusError;
use belle::evaluate::EvalError;
use belle::streaming::StreamError;
use belle::trainer::TrainError;
use thiserror::Error;

/// Command failure, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        })
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Spec(_) | CorpusError::Config(_) | CorpusError::Margin { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<BackboneError> for CliError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::NonFinite(_) | BackboneError::Numerics(_) | BackboneError::Nig(_) | BackboneError::Sampler(_) => {
                CliError::Numerical(e.to_string())
            }
            BackboneError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Backbone(b) => b.into(),
            TrainError::Corpus(c) => c.into(),
            TrainError::NonFinite { .. } | TrainError::Numerics(_) | TrainError::Nig(_) | TrainError::Sampler(_) => {
                CliError::Numerical(e.to_string())
            }
            TrainError::Setup(_) | TrainError::Weights(_) | TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backbone(b) => b.into(),
            EvalError::Corpus(c) => c.into(),
            EvalError::Setup(_) => CliError::Usage(e.to_string()),
            EvalError::Metrics(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<StreamError> for CliError {
    fn from(e: StreamError) -> Self {
        match e {
            StreamError::Backbone(b) => b.into(),
            StreamError::ChunkSize => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
