//! Dense tensors, reverse-mode autodiff, AdamW, learning-rate schedule and
//! finite-difference gradient checking.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
pub mod rng;
mod scalar;
mod schedule;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, DEFAULT_STEP};
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use rng::SeedStream;
pub use scalar::Scalar;
pub use schedule::{lr_schedule, warmup_steps, DEFAULT_WARMUP_RATIO};
pub use tensor::Tensor;

/// Label value excluded from the loss.
pub const IGNORE_INDEX: i64 = -100;

/// Additive attention-mask value for disallowed positions.
pub const MASK_VALUE: f64 = -1e9;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
