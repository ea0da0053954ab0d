//! Two-stage training: single-path segmentation first, then the attenuation
//! network and the refinement net jointly on frame windows.

use bgcut_tensor::{Labels, NormMode, Sgd, SgdConfig, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attenuation::{AttenuationModel, SegNet};
use crate::data::Clip;
use crate::error::{BgError, Result};
use crate::frame::{frames_to_tensor, masks_to_labels, Frame, Mask};
use crate::nn::Module;
use crate::refinement::RefinementNet;

/// Label value excluded from the loss.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop: usize,
    pub base_lr: f64,
    pub poly_power: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Overrides the epoch-derived iteration count when set.
    pub max_iterations: Option<usize>,
    pub refinement_lr_multiplier: f64,
    /// Temporal radius of the stage-2 window.
    pub n: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the refinement L2 term in the stage-2 loss.
    pub l2_weight: f64,
    pub flip: bool,
    /// Keep updating batch-norm running statistics in stage 2.
    pub update_bn_stage2: bool,
    /// Stage 2 trains only the refinement net on cached attenuation scores.
    pub freeze_attenuation: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale values; [`TrainConfig::full_scale`] holds the full-size recipe.
    fn default() -> Self {
        Self {
            batch_size: 4,
            crop: 97,
            base_lr: 1e-3,
            poly_power: 0.9,
            epochs_stage1: 40,
            epochs_stage2: 40,
            max_iterations: None,
            refinement_lr_multiplier: 10.0,
            n: 2,
            momentum: 0.9,
            weight_decay: 1e-4,
            l2_weight: 1.0,
            flip: true,
            update_bn_stage2: true,
            freeze_attenuation: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            batch_size: 16,
            crop: 569,
            ..Self::default()
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BgError::Config(format!("training: {m}")));
        if self.batch_size == 0 || self.crop == 0 {
            return bad("batch_size and crop must be positive");
        }
        if !(self.base_lr > 0.0) || !(self.poly_power > 0.0) || !(self.refinement_lr_multiplier > 0.0) {
            return bad("learning-rate settings must be positive");
        }
        Ok(())
    }

    /// `epochs * ceil(dataset / batch)` unless overridden.
    pub fn iterations(&self, epochs: usize, dataset: usize) -> usize {
        self.max_iterations
            .unwrap_or_else(|| epochs * dataset.div_ceil(self.batch_size))
    }
}

/// `base_lr * (1 - iteration / max_iterations) ^ poly_power`.
pub fn poly_lr(iteration: usize, max_iterations: usize, config: &TrainConfig) -> Result<f64> {
    if max_iterations == 0 {
        return Err(BgError::Config("poly schedule needs max_iterations > 0".into()));
    }
    if iteration > max_iterations {
        return Err(BgError::Config(format!("iteration {iteration} beyond {max_iterations}")));
    }
    let frac = 1.0 - iteration as f64 / max_iterations as f64;
    Ok(config.base_lr * frac.powf(config.poly_power))
}

/// Published settings next to the ones a run used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: TrainConfig,
    pub full_scale: TrainConfig,
    pub seed: u64,
    pub commit: String,
    pub stage: String,
}

impl RunMetadata {
    pub fn new(stage: &str, config: &TrainConfig, commit: &str) -> Self {
        Self {
            config: config.clone(),
            full_scale: TrainConfig::full_scale(),
            seed: config.seed,
            commit: commit.to_string(),
            stage: stage.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    /// Stage-2 components; equal to `loss` and 0 in stage 1.
    pub ce: f64,
    pub l2: f64,
}

/// Top-left corner and flip of a random crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropWindow {
    /// Uniform crop fully inside an `h x w` frame.
    pub fn sample(h: usize, w: usize, size: usize, flip: bool, rng: &mut impl Rng) -> Result<Self> {
        if size > h || size > w {
            return Err(BgError::Config(format!("crop {size} exceeds frame {h}x{w}")));
        }
        Ok(Self {
            y: rng.random_range(0..=h - size),
            x: rng.random_range(0..=w - size),
            size,
            flip: flip && rng.random_bool(0.5),
        })
    }

    pub fn frame(&self, f: &Frame) -> Frame {
        f.crop(self.y, self.x, self.size, self.size, self.flip)
    }

    pub fn mask(&self, m: &Mask) -> Mask {
        m.crop(self.y, self.x, self.size, self.size, self.flip)
    }

    /// Crops every plane of a `[N, C, H, W]` tensor.
    pub fn tensor(&self, t: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, c, h, w) = t.dims4("crop")?;
        let s = self.size;
        if self.y + s > h || self.x + s > w {
            return Err(BgError::Data("crop outside tensor".into()));
        }
        let mut out = Vec::with_capacity(n * c * s * s);
        for plane in t.data().chunks(h * w) {
            for y in self.y..self.y + s {
                let row = &plane[y * w + self.x..y * w + self.x + s];
                if self.flip {
                    out.extend(row.iter().rev());
                } else {
                    out.extend_from_slice(row);
                }
            }
        }
        Ok(Tensor::new([n, c, s, s], out)?)
    }
}

fn diverged(iteration: usize) -> impl Fn(BgError) -> BgError {
    move |e| match e {
        BgError::Tensor(TensorError::NonFinite { .. }) => BgError::Divergence {
            iteration,
            loss: f64::NAN,
        },
        other => other,
    }
}

fn check_loss(iteration: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(BgError::Divergence { iteration, loss })
    }
}

/// Epoch-shuffled index stream.
#[derive(Debug, Clone)]
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
        }
    }

    fn next(&mut self, rng: &mut impl Rng) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Frames and masks flattened from clips. With `bg_negatives`, background
/// samples join as all-background images.
pub fn stage1_samples(clips: &[Clip], bg_negatives: bool) -> Vec<(Frame, Mask)> {
    let mut out = Vec::new();
    for c in clips {
        out.extend(c.frames.iter().cloned().zip(c.masks.iter().cloned()));
        if bg_negatives {
            out.extend(c.bg_samples.iter().map(|f| (f.clone(), Mask::filled(f.width, f.height, 0))));
        }
    }
    out
}

/// Resumable stage-1 loop; owns the sampling RNG and optimizer state.
pub struct Stage1Trainer<'a> {
    data: &'a [(Frame, Mask)],
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    sampler: Sampler,
    opt: Sgd<f32>,
    pub iteration: usize,
    pub max_iterations: usize,
}

impl<'a> Stage1Trainer<'a> {
    pub fn new(data: &'a [(Frame, Mask)], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(BgError::Data("empty training split".into()));
        }
        let max_iterations = config.iterations(config.epochs_stage1, data.len());
        Ok(Self {
            data,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x57a9_e001),
            sampler: Sampler::new(data.len()),
            opt: Sgd::new(config.sgd()),
            iteration: 0,
            max_iterations,
            config,
        })
    }

    fn batch(&mut self) -> Result<(Tensor<f32>, Labels)> {
        let mut frames = Vec::with_capacity(self.config.batch_size);
        let mut masks = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let (f, m) = &self.data[self.sampler.next(&mut self.rng)];
            let win = CropWindow::sample(f.height, f.width, self.config.crop, self.config.flip, &mut self.rng)?;
            frames.push(win.frame(f));
            masks.push(win.mask(m));
        }
        let fr: Vec<&Frame> = frames.iter().collect();
        let ms: Vec<&Mask> = masks.iter().collect();
        Ok((frames_to_tensor(&fr)?, masks_to_labels(&ms)?))
    }

    /// One SGD step at the poly learning rate; returns the logged values.
    pub fn step(&mut self, model: &mut SegNet<f32>) -> Result<IterLog> {
        let it = self.iteration;
        let lr = poly_lr(it.min(self.max_iterations), self.max_iterations.max(1), &self.config)?;
        let (x, labels) = self.batch()?;
        let loss = (|| -> Result<f64> {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let scores = model.forward(&mut tape, xv, NormMode::Train)?;
            let loss = tape.softmax_ce_loss(scores, &labels, IGNORE_LABEL)?;
            let value = tape.value(loss).data()[0] as f64;
            check_loss(it, value)?;
            let grads = tape.backward(loss)?;
            model.absorb(&grads);
            Ok(value)
        })()
        .map_err(diverged(it))?;
        model.sgd_step("", &mut self.opt, lr).map_err(diverged(it))?;
        self.iteration += 1;
        Ok(IterLog {
            iteration: it,
            lr,
            loss,
            ce: loss,
            l2: 0.0,
        })
    }
}

/// Full stage-1 run; `log` sees every iteration.
pub fn train_stage1(
    model: &mut SegNet<f32>,
    data: &[(Frame, Mask)],
    config: &TrainConfig,
    mut log: impl FnMut(&IterLog),
) -> Result<Vec<IterLog>> {
    let mut trainer = Stage1Trainer::new(data, config.clone())?;
    let mut out = Vec::with_capacity(trainer.max_iterations);
    while trainer.iteration < trainer.max_iterations {
        let rec = trainer.step(model)?;
        log(&rec);
        out.push(rec);
    }
    Ok(out)
}

/// Clamped window of frame indices centered at `t`.
pub fn window_indices(t: usize, n: usize, len: usize) -> Vec<usize> {
    (0..=2 * n)
        .map(|k| (t + k).saturating_sub(n).min(len - 1))
        .collect()
}

/// Applies one update: attenuation at `lr`, refinement at `lr * multiplier`.
pub fn stage2_update(
    att: &mut AttenuationModel<f32>,
    refine: &mut RefinementNet<f32>,
    opt_att: &mut Sgd<f32>,
    opt_ref: &mut Sgd<f32>,
    lr: f64,
    multiplier: f64,
) -> Result<()> {
    att.sgd_step("att", opt_att, lr)?;
    refine.sgd_step("refine", opt_ref, lr * multiplier)?;
    Ok(())
}

pub struct Stage2Trainer<'a> {
    clips: &'a [Clip],
    items: Vec<(usize, usize)>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    sampler: Sampler,
    opt_att: Sgd<f32>,
    opt_ref: Sgd<f32>,
    /// Full-frame attenuation scores per clip and frame, when frozen.
    cache: Option<Vec<Vec<Tensor<f32>>>>,
    pub iteration: usize,
    pub max_iterations: usize,
}

impl<'a> Stage2Trainer<'a> {
    pub fn new(clips: &'a [Clip], config: TrainConfig, att: &mut AttenuationModel<f32>) -> Result<Self> {
        config.validate()?;
        let items: Vec<(usize, usize)> = clips
            .iter()
            .enumerate()
            .flat_map(|(c, clip)| (0..clip.frames.len()).map(move |t| (c, t)))
            .collect();
        if items.is_empty() {
            return Err(BgError::Data("empty training split".into()));
        }
        for c in clips {
            c.validate()?;
            if c.masks.len() != c.frames.len() {
                return Err(BgError::Data(format!("clip {} lacks masks", c.id)));
            }
            if att.config().attenuation && c.bg_samples.is_empty() {
                return Err(BgError::MissingBackground);
            }
        }
        let cache = if config.freeze_attenuation {
            att.set_requires_grad(false);
            let mut all = Vec::with_capacity(clips.len());
            for c in clips {
                let bg = if att.config().attenuation {
                    att.compute_bg_global_feature(&c.bg_samples)?
                } else {
                    att.null_feature()
                };
                let scores = c
                    .frames
                    .iter()
                    .map(|f| att.scores(&frames_to_tensor(&[f])?, &bg))
                    .collect::<Result<Vec<_>>>()?;
                all.push(scores);
            }
            Some(all)
        } else {
            None
        };
        let max_iterations = config.iterations(config.epochs_stage2, items.len());
        Ok(Self {
            clips,
            sampler: Sampler::new(items.len()),
            items,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x57a9_e002),
            opt_att: Sgd::new(config.sgd()),
            opt_ref: Sgd::new(config.sgd()),
            cache,
            iteration: 0,
            max_iterations,
            config,
        })
    }

    pub fn window(&self) -> usize {
        2 * self.config.n + 1
    }

    pub fn step(&mut self, att: &mut AttenuationModel<f32>, refine: &mut RefinementNet<f32>) -> Result<IterLog> {
        let it = self.iteration;
        if refine.config().n != self.config.n {
            return Err(BgError::Config(format!(
                "refinement radius {} differs from training radius {}",
                refine.config().n,
                self.config.n
            )));
        }
        let lr = poly_lr(it.min(self.max_iterations), self.max_iterations.max(1), &self.config)?;
        let win = self.window();
        let b = self.config.batch_size;
        let mut frames = Vec::with_capacity(b * win);
        let mut masks = Vec::with_capacity(b * win);
        let mut centers = Vec::with_capacity(b);
        let mut bgs = Vec::with_capacity(b);
        let mut cached = Vec::with_capacity(b * win);
        for _ in 0..b {
            let (c, t) = self.items[self.sampler.next(&mut self.rng)];
            let clip = &self.clips[c];
            let (h, w) = clip.frames[0].dims();
            let crop = CropWindow::sample(h, w, self.config.crop, self.config.flip, &mut self.rng)?;
            for k in window_indices(t, self.config.n, clip.frames.len()) {
                frames.push(crop.frame(&clip.frames[k]));
                masks.push(crop.mask(&clip.masks[k]));
                if let Some(cache) = &self.cache {
                    cached.push(crop.tensor(&cache[c][k])?);
                }
            }
            centers.push(crop.mask(&clip.masks[t]));
            if !clip.bg_samples.is_empty() {
                let pick = self.rng.random_range(0..clip.bg_samples.len());
                let s = &clip.bg_samples[pick];
                let bw = CropWindow::sample(s.height, s.width, self.config.crop, self.config.flip, &mut self.rng)?;
                bgs.push(bw.frame(s));
            } else {
                bgs.push(Frame::filled(self.config.crop, self.config.crop, [0, 0, 0]));
            }
        }
        let fr: Vec<&Frame> = frames.iter().collect();
        let x = frames_to_tensor::<f32>(&fr)?;
        let ms: Vec<&Mask> = masks.iter().collect();
        let labels = masks_to_labels(&ms)?;
        let cs: Vec<&Mask> = centers.iter().collect();
        let target = masks_to_labels(&cs)?.one_hot::<f32>(2);
        let bgr: Vec<&Frame> = bgs.iter().collect();
        let bgx = frames_to_tensor::<f32>(&bgr)?;

        let frozen = self.cache.is_some();
        let mode = if self.config.update_bn_stage2 && !frozen {
            NormMode::Train
        } else {
            NormMode::Inference
        };
        let (loss, ce, l2) = (|| -> Result<(f64, f64, f64)> {
            let mut tape = Tape::new();
            let (scores, ce) = if frozen {
                let parts: Vec<&Tensor<f32>> = cached.iter().collect();
                (tape.constant(Tensor::stack_batch(&parts)?), None)
            } else {
                let xv = tape.constant(x.clone());
                let bv = tape.constant(bgx);
                let s = att.forward_train(&mut tape, xv, bv, win, mode)?;
                let ce = tape.softmax_ce_loss(s, &labels, IGNORE_LABEL)?;
                (s, Some(ce))
            };
            let refined = refine.forward(&mut tape, scores, &x)?;
            let prob = tape.softmax_channel(refined)?;
            let l2 = tape.l2_loss(prob, &target)?;
            let l2w = tape.scale(l2, self.config.l2_weight as f32)?;
            let total = match ce {
                Some(ce) => tape.add(ce, l2w)?,
                None => l2w,
            };
            let ce_v = ce.map_or(0.0, |c| tape.value(c).data()[0] as f64);
            let l2_v = tape.value(l2).data()[0] as f64;
            let total_v = tape.value(total).data()[0] as f64;
            check_loss(it, total_v)?;
            let grads = tape.backward(total)?;
            if !frozen {
                att.absorb(&grads);
            }
            refine.absorb(&grads);
            Ok((total_v, ce_v, l2_v))
        })()
        .map_err(diverged(it))?;
        stage2_update(
            att,
            refine,
            &mut self.opt_att,
            &mut self.opt_ref,
            lr,
            self.config.refinement_lr_multiplier,
        )
        .map_err(diverged(it))?;
        if !frozen {
            att.refresh_fingerprint();
        }
        self.iteration += 1;
        Ok(IterLog {
            iteration: it,
            lr,
            loss,
            ce,
            l2,
        })
    }
}

pub fn train_stage2(
    att: &mut AttenuationModel<f32>,
    refine: &mut RefinementNet<f32>,
    clips: &[Clip],
    config: &TrainConfig,
    mut log: impl FnMut(&IterLog),
) -> Result<Vec<IterLog>> {
    let mut trainer = Stage2Trainer::new(clips, config.clone(), att)?;
    let mut out = Vec::with_capacity(trainer.max_iterations);
    while trainer.iteration < trainer.max_iterations {
        let rec = trainer.step(att, refine)?;
        log(&rec);
        out.push(rec);
    }
    Ok(out)
}
