//! Forward and backward kernels on plain tensors. The [`crate::Tape`] wires
//! these into a differentiable graph.

pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod resample;

pub use conv::{conv2d, conv2d_backward, conv2d_transpose, conv2d_transpose_backward, ConvGeometry};
pub use elementwise::{add, concat_channels, relu};
pub use loss::{l2_loss, softmax_ce_loss, softmax_channel, Labels};
pub use norm::{batch_norm, NormMode, RunningStats};
pub use pool::{global_avg_pool, max_pool2d};
pub use resample::{upsample, UpsampleMode};
