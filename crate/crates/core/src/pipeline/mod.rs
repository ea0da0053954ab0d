//! Inference, evaluation, benchmarking and compositing.

pub mod bench;
pub mod composite;
pub mod eval;
pub mod segment;

pub use bench::{bench, bench_backbone, BenchReport};
pub use composite::{composite, feathered_alpha, CompositeSpec};
pub use eval::{band, band_iou, boundary, evaluate, mean_iou, EvalReport, Iou, LatencyStats};
pub use segment::{segment_frames, segment_video, Counters, Models, Segmentation, VideoSegmenter};
