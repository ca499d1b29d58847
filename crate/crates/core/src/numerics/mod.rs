//! Deterministic differentiable compute: tensors, a reverse-mode tape,
//! transformer layers, the Huber loss, Adam and learning-rate schedules.

pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layers::{transformer_block_forward, TransformerShape, Vars};
pub use ops::{global_mean_pool, huber_loss, pool_windows, temporal_pool};
pub use optim::{adam_step, lr_at, AdamConfig, AdamState, ScheduleKind, ScheduleSpec};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Grads, Param, ParamSet, Tensor};
