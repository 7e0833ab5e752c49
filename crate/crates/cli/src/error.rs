use std::fmt;
use std::process::ExitCode;

use qoecast::eval::EvalError;
use qoecast::explain::ExplainError;
use qoecast::pipeline::PipelineError;
use qoecast::serve::ServeError;
use qoecast::synthgen::SynthError;
use qoecast::telemetry::TelemetryError;
use qoecast::train::TrainError;
use qoecast::zoo::ZooError;

/// Failure classes, one per exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Internal(_) => 3,
        })
    }

    pub fn data(e: impl fmt::Display) -> Self {
        Self::Data(e.to_string())
    }

    pub fn internal(e: impl fmt::Display) -> Self {
        Self::Internal(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "data error: {m}"),
            Self::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::internal(e)
    }
}

impl From<TelemetryError> for CliError {
    fn from(e: TelemetryError) -> Self {
        Self::data(e)
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => Self::Usage(e.to_string()),
            other => Self::data(other),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidConfig(_) => Self::Usage(e.to_string()),
            other => Self::data(other),
        }
    }
}

impl From<ZooError> for CliError {
    fn from(e: ZooError) -> Self {
        match e {
            ZooError::UnknownVariant(_) => Self::Usage(e.to_string()),
            ZooError::Nn(_) => Self::internal(e),
            other => Self::data(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => Self::Usage(e.to_string()),
            TrainError::EmptySplit(_) => Self::data(e),
            TrainError::Zoo(z) => z.into(),
            other => Self::internal(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::ScalerMismatch { .. } | EvalError::EmptyTestSet => Self::data(e),
            EvalError::Zoo(z) => z.into(),
            EvalError::Train(t) => t.into(),
            EvalError::Io(io) => io.into(),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::NoAttentionComponent(_) | ExplainError::InvalidArgument(_) => {
                Self::Usage(e.to_string())
            }
            ExplainError::DegeneratePerturbations(_) => Self::Usage(e.to_string()),
            ExplainError::Zoo(z) => z.into(),
            other => Self::internal(other),
        }
    }
}

impl From<ServeError> for CliError {
    fn from(e: ServeError) -> Self {
        match e {
            ServeError::InvalidPolicy(_) | ServeError::InvalidConfig(_) => {
                Self::Usage(e.to_string())
            }
            ServeError::ScalerMissing | ServeError::Telemetry(_) | ServeError::BadRecord { .. } => {
                Self::data(e)
            }
            ServeError::Zoo(z) => z.into(),
            ServeError::Explain(x) => x.into(),
            other => Self::internal(other),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e)
    }
}
