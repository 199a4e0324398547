//! Minimal CPU neural-network engine: layers with explicit forward/backward
//! passes, seeded initialization, and an Adam optimizer.
//!
//! Tensors are `(batch, channels, height, width)` f32 arrays. Every
//! computation is single-threaded and runs in a fixed order, so results are
//! bitwise reproducible for a given seed.

mod check;
pub mod conv;
pub mod graph;
pub mod init;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod pool;
pub mod store;

pub use conv::Conv2d;
pub use graph::{Concat, Residual, Sequential};
pub use norm::BatchNorm2d;
pub use pool::{AvgPool2d, Flatten, GlobalAvgPool, MaxPool2d, Relu, UpsampleNearest2x};

use crate::error::Result;

pub type Tensor = ndarray::Array4<f32>;

/// A differentiable network component.
///
/// `infer` is a pure read-only pass used at prediction time. `forward`
/// caches whatever the matching `backward` call needs; a `backward` without
/// a preceding `forward` panics. Parameter gradients accumulate until
/// `zero_grad`.
pub trait Layer: Send {
    fn infer(&self, x: &Tensor) -> Tensor;

    fn forward(&mut self, x: &Tensor) -> Tensor;

    fn backward(&mut self, gy: &Tensor) -> Tensor;

    /// Visits (parameter, gradient) slice pairs in a stable order.
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f32])) {
        let _ = f;
    }

    fn zero_grad(&mut self) {}

    /// Appends all persistent state (parameters and buffers) in a stable
    /// order, for checkpointing.
    fn export_state(&self, out: &mut Vec<Vec<f32>>) {
        let _ = out;
    }

    /// Restores state written by `export_state`.
    fn import_state(&mut self, src: &mut dyn Iterator<Item = Vec<f32>>) -> Result<()> {
        let _ = src;
        Ok(())
    }
}

/// Stacks single-image tensors along the batch axis.
pub(crate) fn stack_batch(items: &[Tensor]) -> Tensor {
    let views: Vec<_> = items.iter().map(|t| t.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("uniform shapes")
}

pub(crate) fn import_slice(
    src: &mut dyn Iterator<Item = Vec<f32>>,
    expected: usize,
    what: &str,
) -> Result<Vec<f32>> {
    match src.next() {
        Some(v) if v.len() == expected => Ok(v),
        Some(v) => Err(crate::Error::Checkpoint(format!(
            "{what}: expected {expected} values, found {}",
            v.len()
        ))),
        None => Err(crate::Error::Checkpoint(format!(
            "{what}: checkpoint ended early"
        ))),
    }
}
