use std::collections::BTreeMap;

use bgcut_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::attenuation::{AttenuationModel, GlobalBackgroundFeature, ScoreMap};
use crate::data::Clip;
use crate::error::{BgError, Result};
use crate::frame::{Frame, Mask};
use crate::refinement::{RefinementNet, ScoreStack};
use crate::train::window_indices;

/// Exact pass counts of one segmentation session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub attenuation_forwards: usize,
    pub bg_backbone_passes: usize,
    pub refinement_passes: usize,
}

/// The attenuation network and an optional refinement net.
#[derive(Debug, Clone)]
pub struct Models<T> {
    pub attenuation: AttenuationModel<T>,
    pub refinement: Option<RefinementNet<T>>,
}

/// One output frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmented<T> {
    pub index: usize,
    pub scores: ScoreMap<T>,
    pub mask: Mask,
}

/// Sliding-window inference. Each pushed frame gets exactly one attenuation
/// pass; its scores stay cached until no later window needs them.
pub struct VideoSegmenter<'m, T> {
    models: &'m mut Models<T>,
    bg: GlobalBackgroundFeature<T>,
    n: usize,
    frames: BTreeMap<usize, Frame>,
    scores: BTreeMap<usize, ScoreMap<T>>,
    received: usize,
    emitted: usize,
    counters: Counters,
}

impl<'m, T: Scalar> VideoSegmenter<'m, T> {
    /// Computes the background feature once (one pass per sample). Without
    /// attenuation the samples are ignored and may be empty.
    pub fn new(models: &'m mut Models<T>, bg_samples: &[Frame], n: usize) -> Result<Self> {
        if let Some(r) = &models.refinement {
            if r.config().n != n {
                return Err(BgError::Config(format!(
                    "refinement net was built for n = {}, segmenter asked for n = {n}",
                    r.config().n
                )));
            }
        }
        let mut counters = Counters::default();
        let bg = if models.attenuation.config().attenuation {
            if bg_samples.is_empty() {
                return Err(BgError::MissingBackground);
            }
            counters.bg_backbone_passes = bg_samples.len();
            models.attenuation.compute_bg_global_feature(bg_samples)?
        } else {
            models.attenuation.null_feature()
        };
        Ok(Self {
            models,
            bg,
            n,
            frames: BTreeMap::new(),
            scores: BTreeMap::new(),
            received: 0,
            emitted: 0,
            counters,
        })
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn feature(&self) -> &GlobalBackgroundFeature<T> {
        &self.bg
    }

    /// Scores new frames and returns every output whose window is complete.
    pub fn push(&mut self, frames: &[Frame]) -> Result<Vec<Segmented<T>>> {
        for f in frames {
            if let Some(first) = self.frames.values().next() {
                if first.dims() != f.dims() {
                    return Err(BgError::Data("frame size changed mid-clip".into()));
                }
            }
            let t = self.received;
            let s = self.models.attenuation.forward(f, &self.bg, t)?;
            self.counters.attenuation_forwards += 1;
            self.scores.insert(t, s);
            self.frames.insert(t, f.clone());
            self.received += 1;
        }
        let mut out = Vec::new();
        while self.emitted + self.n < self.received {
            out.push(self.emit(None)?);
        }
        Ok(out)
    }

    /// Flushes the trailing frames with clamped windows.
    pub fn finish(mut self) -> Result<(Vec<Segmented<T>>, Counters)> {
        let total = self.received;
        let mut out = Vec::new();
        while self.emitted < total {
            out.push(self.emit(Some(total))?);
        }
        Ok((out, self.counters))
    }

    fn emit(&mut self, total: Option<usize>) -> Result<Segmented<T>> {
        let t = self.emitted;
        // Before the clip ends, the window's right edge is never clamped.
        let len = total.unwrap_or(self.received);
        let idx = window_indices(t, self.n, len);
        let scores = match &mut self.models.refinement {
            Some(r) => {
                let stack = ScoreStack {
                    scores: idx.iter().map(|i| &self.scores[i]).collect(),
                    guidance: idx.iter().map(|i| &self.frames[i]).collect(),
                    center_index: t,
                };
                let s = r.refine(&stack)?;
                self.counters.refinement_passes += 1;
                s
            }
            None => self.scores[&t].clone(),
        };
        let mask = scores.predict_mask()?;
        self.emitted += 1;
        let keep_from = (t + 1).saturating_sub(self.n);
        self.scores.retain(|&k, _| k >= keep_from);
        self.frames.retain(|&k, _| k >= keep_from);
        Ok(Segmented {
            index: t,
            scores,
            mask,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Segmentation<T> {
    pub outputs: Vec<Segmented<T>>,
    pub counters: Counters,
}

impl<T> Segmentation<T> {
    pub fn masks(&self) -> Vec<Mask> {
        self.outputs.iter().map(|o| o.mask.clone()).collect()
    }
}

/// Whole-clip inference.
pub fn segment_video<T: Scalar>(clip: &Clip, models: &mut Models<T>, n: usize) -> Result<Segmentation<T>> {
    segment_frames(&clip.frames, &clip.bg_samples, models, n, clip.frames.len().max(1))
}

/// Inference feeding the segmenter `chunk` frames at a time.
pub fn segment_frames<T: Scalar>(
    frames: &[Frame],
    bg_samples: &[Frame],
    models: &mut Models<T>,
    n: usize,
    chunk: usize,
) -> Result<Segmentation<T>> {
    let mut seg = VideoSegmenter::new(models, bg_samples, n)?;
    let mut outputs = Vec::with_capacity(frames.len());
    for part in frames.chunks(chunk.max(1)) {
        outputs.extend(seg.push(part)?);
    }
    let (rest, counters) = seg.finish()?;
    outputs.extend(rest);
    Ok(Segmentation { outputs, counters })
}
