//! Failures of a command and the process exit code each maps to.

use mziris::encoder::EncoderError;
use mziris::eval::EvalError;
use mziris::io::ManifestError;
use mziris::pairing::PairingError;
use mziris::preprocess::PreprocessError;
use mziris::quality::QualityError;
use mziris::report::ReportError;
use mziris::trainer::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Code {
    /// Unexpected runtime failure.
    Internal = 1,
    /// Unreadable or invalid input, config or artifact.
    Input = 2,
    /// The requested pairs cannot be built from the manifest.
    Infeasible = 3,
    /// A training run produced a non-finite loss.
    Divergence = 4,
    /// An output exists and `--overwrite` was not given.
    Exists = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub message: String,
}

impl CliError {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(Code::Input, message)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<QualityError> for CliError {
    fn from(e: QualityError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => Self::new(Code::Internal, e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}

impl From<PairingError> for CliError {
    fn from(e: PairingError) -> Self {
        match e {
            PairingError::InsufficientNegatives { .. } | PairingError::NoTwinGroups => {
                Self::new(Code::Infeasible, e.to_string())
            }
            _ => Self::input(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Tensor(_) => Self::new(Code::Internal, e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Self::new(Code::Divergence, e.to_string()),
            TrainError::Encoder(inner) => inner.into(),
            TrainError::InvalidConfig(_) | TrainError::NoTrainingPairs | TrainError::Preprocess(_) => {
                Self::input(e.to_string())
            }
            TrainError::Tensor(_) | TrainError::Io { .. } => Self::new(Code::Internal, e.to_string()),
        }
    }
}

/// Attaches a path to an I/O failure.
pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::new(Code::Internal, format!("{}: {e}", path.display()))
}
