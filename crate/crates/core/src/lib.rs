//! Portrait-video background cut: a pruned residual backbone, a two-path
//! background-attenuation segmenter, a spatial-temporal refinement net, their
//! two-stage training on synthetic clips, and the inference, evaluation and
//! compositing pipeline.

pub mod attenuation;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod frame;
pub mod nn;
pub mod pipeline;
pub mod prune;
pub mod refinement;
pub mod train;

pub use bgcut_tensor as tensor;
pub use error::{BgError, Result};
