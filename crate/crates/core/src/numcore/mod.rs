//! Dense `f64` tensors, a reverse-mode tape, Adam, and parameter checkpoints.

mod adam;
pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{BoundParams, Gradients, Tape, Var, EPS};
pub use tensor::Tensor;
