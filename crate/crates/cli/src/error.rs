use std::fmt;

use repinv::autodiff::GraphError;
use repinv::checkpoint::CheckpointError;
use repinv::classifier::ClassifierError;
use repinv::data::DataError;
use repinv::eval::EvalError;
use repinv::inverter::InverterError;
use repinv::mi::MiError;
use repinv::mse::MseError;

/// A failure mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values (exit 1).
    Usage(String),
    /// Missing or malformed files and other I/O (exit 2).
    Data(String),
    /// Non-finite values during training or evaluation (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl fmt::Display) -> Self {
        CliError::Data(msg.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::LevelsOutOfRange(_) | DataError::CanvasTooSmall { .. } | DataError::BadFractions(_) => {
                CliError::Usage(e.to_string())
            }
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::Graph(g) => g.into(),
            ClassifierError::Checkpoint(c) => c.into(),
            ClassifierError::Diverged { .. } => CliError::Numerical(e.to_string()),
            e => CliError::Usage(e.to_string()),
        }
    }
}

impl From<InverterError> for CliError {
    fn from(e: InverterError) -> Self {
        match e {
            InverterError::Graph(g) => g.into(),
            InverterError::Classifier(c) => c.into(),
            InverterError::Checkpoint(c) => c.into(),
            InverterError::Diverged { .. } => CliError::Numerical(e.to_string()),
            InverterError::Shape(_) => CliError::Data(e.to_string()),
            e => CliError::Usage(e.to_string()),
        }
    }
}

impl From<MseError> for CliError {
    fn from(e: MseError) -> Self {
        match e {
            MseError::Graph(g) => g.into(),
            MseError::Classifier(c) => c.into(),
            MseError::Checkpoint(c) => c.into(),
            MseError::Diverged { .. } => CliError::Numerical(e.to_string()),
            MseError::Shape(_) => CliError::Data(e.to_string()),
            MseError::Config(_) => CliError::Usage(e.to_string()),
        }
    }
}

impl From<MiError> for CliError {
    fn from(e: MiError) -> Self {
        match e {
            MiError::Inverter(i) => i.into(),
            e => CliError::Usage(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Inverter(i) => i.into(),
            EvalError::Classifier(c) => c.into(),
            EvalError::Mi(m) => m.into(),
            EvalError::Invalid(_) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}
