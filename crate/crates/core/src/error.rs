use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("level {level} out of range 0..={max}")]
    LevelOutOfRange { level: usize, max: usize },

    #[error("non-contractive jump: {from} -> {to}")]
    NonContractiveJump { from: usize, to: usize },

    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("checksum failure: {0}")]
    Checksum(String),

    #[error("unknown version: {0}")]
    UnknownVersion(u32),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("divergence: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("corrupt engine state: {0}")]
    CorruptEngineState(String),

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("sequence too short: need at least {need} frames, got {got}")]
    TooShort { need: usize, got: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short code used by the CLI and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidPose(_) => "invalid_pose",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::LevelOutOfRange { .. } => "level_out_of_range",
            Error::NonContractiveJump { .. } => "non_contractive_jump",
            Error::InvalidHorizon(_) => "invalid_horizon",
            Error::CorruptModel(_) => "corrupt_model",
            Error::Checksum(_) => "checksum_failure",
            Error::UnknownVersion(_) => "unknown_version",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Divergence { .. } => "divergence",
            Error::CorruptEngineState(_) => "corrupt_engine_state",
            Error::InvalidConfig(_) => "invalid_config",
            Error::TooShort { .. } => "too_short",
            Error::LengthMismatch(..) => "length_mismatch",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
