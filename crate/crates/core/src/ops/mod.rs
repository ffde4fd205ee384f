//! Differentiable layer primitives.
//!
//! Each op validates shapes, computes the forward value eagerly, and pushes
//! a tape node whose `backward` knows how to produce input gradients. Kernels
//! may parallelize over independent output regions; reductions always run in
//! a fixed order so results are bit-identical regardless of thread count.

mod activation;
mod batchnorm;
mod concat;
mod conv;
mod elementwise;
mod linear;
mod loss;
mod pool;

pub use activation::relu;
pub use batchnorm::{batchnorm, BatchNormState};
pub use concat::concat;
pub use conv::{conv2d, conv2d_reference, conv_output_extent};
pub use elementwise::{mask_mul, mul, sum};
pub use linear::linear;
pub use loss::softmax_cross_entropy;
pub use pool::{avgpool2x2, global_avgpool};

/// Whether a forward pass uses batch statistics and dropout (train) or
/// running statistics and identity masks (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}
