//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! optimizer primitives and checkpoint I/O used by the recurrent models.

mod checkpoint;
mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{from_bytes, load, save, to_bytes, CHECKPOINT_HEADER};
pub use gradcheck::grad_check;
pub use optim::{clip_global_norm, sgd_step};
pub use param::{Param, ParamId, ParamStore, INIT_SCALE};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("backward already called on this tape")]
    TapeConsumed,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[cfg(test)]
mod tests;
