//! Dense `f64` tensors, a define-by-run gradient tape, Adam, and checkpoints.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use params::{uniform, xavier, Grads, ParamId, ParamStore};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
