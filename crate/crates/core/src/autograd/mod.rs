//! Dense f64 arrays, a reverse-mode differentiation tape, AdamW, and the
//! checkpoint container. Everything learnable in this crate is built on it.

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{save_checkpoint, Checkpoint, CheckpointHeader, OptimizerMeta, ParamEntry};
pub use gradcheck::grad_check;
pub use optim::{AdamW, ParamId, ParamSet, Parameter};
pub use tape::{sigmoid_scalar, topk_indices, Gradients, PadMode, Tape, Var};
pub use tensor::{broadcast_binary, broadcast_shapes, reduce_to_shape, Tensor};
