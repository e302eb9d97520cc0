use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core, samplers, networks and pipelines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside [0, {steps})")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("degenerate DDIM step: alpha_bar {0:e} below 1e-8")]
    DegenerateStep(f64),
    #[error("mask is not binary")]
    NonBinaryMask,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    Format(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
