//! Dense f64 tensors with reverse-mode gradients, named parameter stores,
//! gradient checking, and binary checkpoint persistence.
//!
//! The engine is deliberately small: row-major storage, no general
//! broadcasting (scalar-vs-tensor and equal-shape only), and exactly the
//! operations the encoder and score networks need. Tensors are immutable
//! values; a [`Tape`] records one forward pass and replays it in reverse.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, save_checkpoint_as, CheckpointDtype};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ModelParams, ParamVars};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tensor construction, tape operations, and checkpoints.
#[derive(Debug, Error)]
pub enum NdError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CkptFormat(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CkptVersion { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CkptChecksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated: {0}")]
    CkptTruncated(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}

pub type NdResult<T> = Result<T, NdError>;
