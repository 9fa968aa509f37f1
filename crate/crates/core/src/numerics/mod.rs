//! Tensors, reverse-mode gradients, optimizers and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::{adam_step, Adam, AdamConfig, EmaState, LrSchedule, OptimizerState, ScheduleKind};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
