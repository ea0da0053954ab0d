//! Synthetic training data and its on-disk form.

pub mod manifest;
pub mod synth;

pub use manifest::{generate_dataset, load_split, ClipManifest, DatasetSpec, Split, SplitManifest};
pub use synth::{ambiguity_suite, render_clip, render_clip_with_role, Clip, SyntheticSceneSpec};
