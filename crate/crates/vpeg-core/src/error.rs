//! Error type shared by every module in the core crate.

use alloc::string::String;
use core::fmt;

/// Errors produced by graph construction, training, and the data pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes incompatible with the requested op.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// `backward` called on a node that is not 1x1.
    NonScalarRoot { shape: (usize, usize) },
    /// A parameter gradient contained NaN or infinity.
    NonFiniteGradient { name: String },
    /// Training loss left the finite range.
    NonFiniteLoss { epoch: usize, batch: usize },
    /// Training loss exceeded the divergence threshold.
    Diverged { epoch: usize, loss: f64 },
    /// Dataset spec failed validation.
    InvalidSpec(String),
    /// A generator or index was handed an empty dataset.
    EmptyDataset,
    /// Swap reconstruction asked for the identical pair (i, i).
    DegenerateSwap { t: usize },
    /// Feature matrix too short for the requested operation.
    TooFewFrames { got: usize, need: usize },
    /// Retrieval requested more neighbours than the pool holds.
    KTooLarge { k: usize, pool: usize },
    /// Example statistics need at least two examples.
    TooFewExamples { got: usize },
    /// A variance argument was negative or non-positive where positivity is required.
    InvalidVariance { value: f64 },
    /// Non-finite value fed into a prediction step.
    NonFiniteInput { op: &'static str },
    /// Example horizon shorter than the rollout needs.
    HorizonMismatch { need: usize, got: usize },
    /// Training config failed validation.
    InvalidConfig(String),
    /// Unseen-class protocol violations.
    HeldOutModeInTrain { mode: u32 },
    NoHeldOutMode,
    /// Mode classification asked about a label with no template.
    UnknownMode { mode: u32 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "shape mismatch in `{op}`: {}x{} vs {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::NonScalarRoot { shape } => write!(
                f,
                "backward root must be 1x1, got {}x{}",
                shape.0, shape.1
            ),
            Error::NonFiniteGradient { name } => {
                write!(f, "non-finite gradient in parameter `{name}`")
            }
            Error::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            Error::Diverged { epoch, loss } => {
                write!(f, "training diverged at epoch {epoch} (loss {loss:.3e})")
            }
            Error::InvalidSpec(msg) => write!(f, "invalid dataset spec: {msg}"),
            Error::EmptyDataset => write!(f, "dataset has no sequences"),
            Error::DegenerateSwap { t } => {
                write!(f, "swap reconstruction needs two distinct timesteps, got ({t}, {t})")
            }
            Error::TooFewFrames { got, need } => {
                write!(f, "feature sequence has {got} frames, need at least {need}")
            }
            Error::KTooLarge { k, pool } => {
                write!(f, "k={k} exceeds candidate pool of size {pool}")
            }
            Error::TooFewExamples { got } => {
                write!(f, "example statistics need K >= 2, got {got}")
            }
            Error::InvalidVariance { value } => {
                write!(f, "variance must be positive, got {value}")
            }
            Error::NonFiniteInput { op } => write!(f, "non-finite input to `{op}`"),
            Error::HorizonMismatch { need, got } => {
                write!(f, "example horizon {got} shorter than required {need}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid train config: {msg}"),
            Error::HeldOutModeInTrain { mode } => {
                write!(f, "held-out mode {mode} present in training split")
            }
            Error::NoHeldOutMode => {
                write!(f, "unseen-class protocol requires a held-out mode")
            }
            Error::UnknownMode { mode } => write!(f, "no template for mode {mode}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
