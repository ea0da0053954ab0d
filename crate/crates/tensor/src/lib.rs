//! Dense tensor arithmetic for the background-cut networks: convolution,
//! normalization, pooling, resampling and losses, each with a hand-written
//! backward pass, tied together by a reverse-mode [`Tape`].
//!
//! Kernels split work over batch samples with rayon when the `parallel`
//! feature is on (the default). The split is fixed by tensor shape, so
//! results do not depend on the thread count or on
//! [`parallel::set_parallel`].

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod parallel;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod variable;

pub use error::{Result, TensorError};
pub use kernels::conv::ConvGeometry;
pub use kernels::loss::Labels;
pub use kernels::norm::{NormMode, RunningStats};
pub use kernels::resample::UpsampleMode;
pub use optim::{sgd_step, Sgd, SgdConfig};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use variable::Variable;
