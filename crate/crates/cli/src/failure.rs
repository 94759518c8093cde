use std::path::Path;

use flowpost::calib::CalibError;
use flowpost::condmodel::ModelError;
use flowpost::flows::FlowError;
use flowpost::gradcore::GradError;
use flowpost::losses::LossError;
use flowpost::oracle::OracleError;
use flowpost::toymc::ToyError;

/// Command failure, grouped by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad or inconsistent arguments (exit 2).
    Usage(String),
    /// Unreadable, malformed or incompatible inputs and I/O problems (exit 3).
    Data(String),
    /// Numerical breakdown such as a diverged training run (exit 4).
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::Data(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "argument error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<ToyError> for Failure {
    fn from(e: ToyError) -> Self {
        match e {
            ToyError::UnknownDataset(_) | ToyError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<FlowError> for Failure {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Root(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<GradError> for Failure {
    fn from(e: GradError) -> Self {
        Failure::Numeric(e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Flow(f) => f.into(),
            ModelError::Grad(g) => g.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<LossError> for Failure {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Model(m) => m.into(),
            LossError::Grad(g) => g.into(),
            LossError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<CalibError> for Failure {
    fn from(e: CalibError) -> Self {
        match e {
            CalibError::Model(m) => m.into(),
            CalibError::Special(_) => Failure::Numeric(e.to_string()),
            CalibError::Levels | CalibError::NoSimulations => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<OracleError> for Failure {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::AxisTooShort(_) | OracleError::AxisCount(_) | OracleError::Mass(_) => {
                Failure::Usage(e.to_string())
            }
            OracleError::ZeroLikelihood => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}
