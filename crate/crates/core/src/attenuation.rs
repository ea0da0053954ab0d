//! Single-path segmentation network and the two-path background-attenuation
//! network built from it.

use bgcut_tensor::{ConvGeometry, NormMode, Scalar, Tape, Tensor, UpsampleMode, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::Archive;
use crate::error::{BgError, Result};
use crate::frame::{argmax_mask, frames_to_tensor, Frame, Mask};
use crate::nn::{join, Conv2d, ConvBn, Module, Slot, SlotMut};
use crate::prune::Prunable;

const CLASSIFIER_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub backbone: BackboneConfig,
    /// Width of the segmentation feature map; `None` uses the backbone's last stage width.
    pub seg_channels: Option<usize>,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            seg_channels: None,
        }
    }
}

impl SegNetConfig {
    pub fn seg_width(&self) -> usize {
        self.seg_channels.unwrap_or(self.backbone.stage_channels[3])
    }
}

fn classifier<T: Scalar>(cin: usize, rng: &mut ChaCha8Rng) -> Conv2d<T> {
    Conv2d::from_weight(
        Tensor::randn([2, cin, 1, 1], CLASSIFIER_STD, rng),
        true,
        ConvGeometry::new(1, 0, 1),
    )
}

fn upsample_scores<T: Scalar>(tape: &mut Tape<T>, logits: Var, h: usize, w: usize) -> Result<Var> {
    Ok(tape.upsample(logits, h, w, UpsampleMode::Bilinear)?)
}

/// Stage-1 model: backbone, segmentation-feature conv, 1x1 classifier.
#[derive(Debug, Clone)]
pub struct SegNet<T> {
    config: SegNetConfig,
    pub backbone: Backbone<T>,
    pub pre: ConvBn<T>,
    pub classifier: Conv2d<T>,
}

impl<T: Scalar> SegNet<T> {
    pub fn build(config: SegNetConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::build(config.backbone.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e9_0001);
        let seg = config.seg_width();
        if seg == 0 {
            return Err(BgError::Config("segmentation width must be positive".into()));
        }
        let pre = ConvBn::he(backbone.out_channels(), seg, 3, ConvGeometry::new(1, 1, 1), &mut rng);
        Ok(Self {
            classifier: classifier(seg, &mut rng),
            config,
            backbone,
            pre,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    /// Segmentation feature map at output stride.
    pub fn seg_features(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Var> {
        let f = self.backbone.forward(tape, x, mode)?;
        let f = self.pre.forward(tape, f, mode)?;
        Ok(tape.relu(f)?)
    }

    /// Full-resolution logits `[N, 2, H, W]`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Var> {
        let (h, w) = (tape.value(x).shape()[2], tape.value(x).shape()[3]);
        let f = self.seg_features(tape, x, mode)?;
        let logits = self.classifier.forward(tape, f)?;
        upsample_scores(tape, logits, h, w)
    }

    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let y = self.forward(&mut tape, v, NormMode::Inference)?;
        Ok(tape.value(y).clone())
    }

    pub fn predict_masks(&mut self, frames: &[Frame]) -> Result<Vec<Mask>> {
        frames
            .iter()
            .map(|f| {
                let s = self.predict(&frames_to_tensor(&[f])?)?;
                argmax_mask(&s)
            })
            .collect()
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str) {
        archive.put_json(join(prefix, "segnet"), &self.config);
        self.backbone.save_into(archive, &join(prefix, "backbone"));
        archive.put_module(&join(prefix, "pre"), &self.pre);
        archive.put_module(&join(prefix, "classifier"), &self.classifier);
    }

    pub fn load_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let config: SegNetConfig = archive.json(&join(prefix, "segnet"))?;
        let backbone = Backbone::load_from(archive, &join(prefix, "backbone"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = config.seg_width();
        let mut pre = ConvBn::he(backbone.out_channels(), seg, 3, ConvGeometry::new(1, 1, 1), &mut rng);
        let mut cls = classifier(seg, &mut rng);
        archive.load_module(&join(prefix, "pre"), &mut pre)?;
        archive.load_module(&join(prefix, "classifier"), &mut cls)?;
        Ok(Self {
            config,
            backbone,
            pre,
            classifier: cls,
        })
    }
}

impl<T: Scalar> Module<T> for SegNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.pre.visit(&join(prefix, "pre"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.pre.visit_mut(&join(prefix, "pre"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

impl<T: Scalar> Prunable<T> for SegNet<T> {
    fn prune_step(&mut self, keep_ratio: f64) -> Result<()> {
        let step = self.backbone.prune_step(keep_ratio)?;
        self.pre.conv.select_inputs(&step.output_keep)?;
        Ok(())
    }

    fn filter_counts(&self) -> Vec<(String, usize)> {
        self.backbone.filter_counts()
    }

    fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict(x)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttenuationConfig {
    /// Hidden width of the 1x1 fusion layer after the concat; 0 feeds the
    /// concat straight into the classifier.
    pub fuse_channels: usize,
    /// When false the background path sees an all-zero feature (same capacity).
    pub attenuation: bool,
}

impl Default for AttenuationConfig {
    fn default() -> Self {
        Self {
            fuse_channels: 32,
            attenuation: true,
        }
    }
}

/// Pooled background descriptor shared by every frame of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBackgroundFeature<T> {
    /// `[1, C, 1, 1]`.
    pub vector: Tensor<T>,
    pub sample_count: usize,
    /// Fingerprint of the background backbone that produced it.
    pub fingerprint: u32,
}

/// Class scores for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T> {
    /// `[1, 2, H, W]` logits: channel 0 background, channel 1 foreground.
    pub scores: Tensor<T>,
    pub frame_index: usize,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn predict_mask(&self) -> Result<Mask> {
        argmax_mask(&self.scores)
    }
}

pub fn predict_mask<T: Scalar>(score: &ScoreMap<T>) -> Result<Mask> {
    score.predict_mask()
}

/// Main path plus background path, concatenated before the classifier.
#[derive(Debug, Clone)]
pub struct AttenuationModel<T> {
    seg_config: SegNetConfig,
    config: AttenuationConfig,
    pub main: Backbone<T>,
    pub bg: Backbone<T>,
    pub pre: ConvBn<T>,
    pub fuse: Option<Conv2d<T>>,
    pub classifier: Conv2d<T>,
    bg_fingerprint: u32,
}

impl<T: Scalar> AttenuationModel<T> {
    pub fn build(seg: SegNetConfig, config: AttenuationConfig, seed: u64) -> Result<Self> {
        Self::from_stage1(&SegNet::build(seg, seed)?, config, seed)
    }

    /// Both backbones and the segmentation-feature conv start from `stage1`;
    /// the fusion and classifier layers are fresh.
    pub fn from_stage1(stage1: &SegNet<T>, config: AttenuationConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77e_0002);
        let seg = stage1.pre.out_channels();
        let cat = seg + stage1.backbone.out_channels();
        let fuse = (config.fuse_channels > 0).then(|| {
            Conv2d::he(cat, config.fuse_channels, 1, ConvGeometry::new(1, 0, 1), true, &mut rng)
        });
        let cls_in = if config.fuse_channels > 0 { config.fuse_channels } else { cat };
        let mut m = Self {
            seg_config: stage1.config().clone(),
            config,
            main: stage1.backbone.clone(),
            bg: stage1.backbone.clone(),
            pre: stage1.pre.clone(),
            fuse,
            classifier: classifier(cls_in, &mut rng),
            bg_fingerprint: 0,
        };
        m.refresh_fingerprint();
        Ok(m)
    }

    pub fn config(&self) -> &AttenuationConfig {
        &self.config
    }

    pub fn seg_config(&self) -> &SegNetConfig {
        &self.seg_config
    }

    /// Must be called after the background backbone changes.
    pub fn refresh_fingerprint(&mut self) {
        self.bg_fingerprint = self.bg.fingerprint();
    }

    pub fn bg_fingerprint(&self) -> u32 {
        self.bg_fingerprint
    }

    pub fn bg_channels(&self) -> usize {
        self.bg.out_channels()
    }

    /// Pooled background features `[N, C, 1, 1]` of a batch of samples.
    pub fn bg_vectors(&mut self, tape: &mut Tape<T>, bg: Var, mode: NormMode) -> Result<Var> {
        let f = self.bg.forward(tape, bg, mode)?;
        Ok(tape.global_avg_pool(f)?)
    }

    /// Scores from segmentation features and a per-sample background map
    /// already at feature resolution.
    pub fn head_with_map(&mut self, tape: &mut Tape<T>, seg: Var, bg_map: Var, out: (usize, usize)) -> Result<Var> {
        let cat = tape.concat_channels(&[seg, bg_map])?;
        let z = match &mut self.fuse {
            Some(f) => {
                let z = f.forward(tape, cat)?;
                tape.relu(z)?
            }
            None => cat,
        };
        let logits = self.classifier.forward(tape, z)?;
        upsample_scores(tape, logits, out.0, out.1)
    }

    /// Scores for `frames` `[N, 3, H, W]` given background vectors `[N, C, 1, 1]`.
    pub fn forward_with_vectors(&mut self, tape: &mut Tape<T>, frames: Var, bg_vec: Var, mode: NormMode) -> Result<Var> {
        let (h, w) = (tape.value(frames).shape()[2], tape.value(frames).shape()[3]);
        let f = self.main.forward(tape, frames, mode)?;
        let f = self.pre.forward(tape, f, mode)?;
        let seg = tape.relu(f)?;
        let (fh, fw) = (tape.value(seg).shape()[2], tape.value(seg).shape()[3]);
        let bg_vec = if self.config.attenuation {
            bg_vec
        } else {
            let shape = tape.value(bg_vec).shape().to_vec();
            tape.constant(Tensor::zeros(shape))
        };
        let map = tape.upsample(bg_vec, fh, fw, UpsampleMode::Tile)?;
        self.head_with_map(tape, seg, map, (h, w))
    }

    /// Training forward: `frames` holds `window` consecutive frames per item,
    /// `bg` one background sample per item. Returns `[N * window, 2, H, W]`.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, frames: Var, bg: Var, window: usize, mode: NormMode) -> Result<Var> {
        let vecs = if self.config.attenuation {
            self.bg_vectors(tape, bg, mode)?
        } else {
            let n = tape.value(bg).shape()[0];
            tape.constant(Tensor::zeros([n, self.bg_channels(), 1, 1]))
        };
        let vecs = tape.repeat_batch(vecs, window)?;
        self.forward_with_vectors(tape, frames, vecs, mode)
    }

    /// Mean of the per-sample pooled features. One background backbone pass per sample.
    pub fn compute_bg_global_feature(&mut self, bg_frames: &[Frame]) -> Result<GlobalBackgroundFeature<T>> {
        if bg_frames.is_empty() {
            return Err(BgError::MissingBackground);
        }
        let mut sum: Option<Tensor<T>> = None;
        for f in bg_frames {
            let mut tape = Tape::inference();
            let x = tape.constant(frames_to_tensor(&[f])?);
            let v = self.bg_vectors(&mut tape, x, NormMode::Inference)?;
            match &mut sum {
                Some(s) => s.add_assign(tape.value(v)),
                None => sum = Some(tape.value(v).clone()),
            }
        }
        let k = T::lit(bg_frames.len() as f64);
        Ok(GlobalBackgroundFeature {
            vector: sum.expect("nonempty").map(|v| v / k),
            sample_count: bg_frames.len(),
            fingerprint: self.bg_fingerprint,
        })
    }

    /// All-zero feature for models trained without attenuation.
    pub fn null_feature(&self) -> GlobalBackgroundFeature<T> {
        GlobalBackgroundFeature {
            vector: Tensor::zeros([1, self.bg_channels(), 1, 1]),
            sample_count: 0,
            fingerprint: self.bg_fingerprint,
        }
    }

    fn check_feature(&self, bg: &GlobalBackgroundFeature<T>) -> Result<()> {
        if bg.fingerprint != self.bg_fingerprint {
            return Err(BgError::StaleFeature {
                expected: self.bg_fingerprint,
                found: bg.fingerprint,
            });
        }
        Ok(())
    }

    /// Inference scores `[N, 2, H, W]` for a stacked batch.
    pub fn scores(&mut self, frames: &Tensor<T>, bg: &GlobalBackgroundFeature<T>) -> Result<Tensor<T>> {
        self.check_feature(bg)?;
        let n = frames.shape()[0];
        let mut tape = Tape::inference();
        let x = tape.constant(frames.clone());
        let v = tape.constant(bg.vector.clone());
        let v = tape.repeat_batch(v, n)?;
        let y = self.forward_with_vectors(&mut tape, x, v, NormMode::Inference)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward(&mut self, frame: &Frame, bg: &GlobalBackgroundFeature<T>, frame_index: usize) -> Result<ScoreMap<T>> {
        let scores = self.scores(&frames_to_tensor(&[frame])?, bg)?;
        Ok(ScoreMap { scores, frame_index })
    }

    /// One batched pass; `first_index` labels the first frame.
    pub fn forward_batch(&mut self, frames: &[Frame], bg: &GlobalBackgroundFeature<T>, first_index: usize) -> Result<Vec<ScoreMap<T>>> {
        let refs: Vec<&Frame> = frames.iter().collect();
        let all = self.scores(&frames_to_tensor(&refs)?, bg)?;
        (0..frames.len())
            .map(|i| {
                Ok(ScoreMap {
                    scores: all.slice_batch(i, 1)?,
                    frame_index: first_index + i,
                })
            })
            .collect()
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str) {
        archive.put_json(join(prefix, "segnet"), &self.seg_config);
        archive.put_json(join(prefix, "attenuation"), &self.config);
        self.main.save_into(archive, &join(prefix, "main"));
        self.bg.save_into(archive, &join(prefix, "bg"));
        archive.put_module(&join(prefix, "pre"), &self.pre);
        if let Some(f) = &self.fuse {
            archive.put_module(&join(prefix, "fuse"), f);
        }
        archive.put_module(&join(prefix, "classifier"), &self.classifier);
    }

    pub fn load_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let seg_config: SegNetConfig = archive.json(&join(prefix, "segnet"))?;
        let config: AttenuationConfig = archive.json(&join(prefix, "attenuation"))?;
        let main = Backbone::load_from(archive, &join(prefix, "main"))?;
        let bg = Backbone::load_from(archive, &join(prefix, "bg"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = seg_config.seg_width();
        let mut pre = ConvBn::he(main.out_channels(), seg, 3, ConvGeometry::new(1, 1, 1), &mut rng);
        archive.load_module(&join(prefix, "pre"), &mut pre)?;
        let cat = seg + bg.out_channels();
        let mut fuse = (config.fuse_channels > 0)
            .then(|| Conv2d::he(cat, config.fuse_channels, 1, ConvGeometry::new(1, 0, 1), true, &mut rng));
        if let Some(f) = &mut fuse {
            archive.load_module(&join(prefix, "fuse"), f)?;
        }
        let cls_in = if config.fuse_channels > 0 { config.fuse_channels } else { cat };
        let mut cls = classifier(cls_in, &mut rng);
        archive.load_module(&join(prefix, "classifier"), &mut cls)?;
        let mut m = Self {
            seg_config,
            config,
            main,
            bg,
            pre,
            fuse,
            classifier: cls,
            bg_fingerprint: 0,
        };
        m.refresh_fingerprint();
        Ok(m)
    }
}

impl<T: Scalar> Module<T> for AttenuationModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.main.visit(&join(prefix, "main"), f);
        self.bg.visit(&join(prefix, "bg"), f);
        self.pre.visit(&join(prefix, "pre"), f);
        if let Some(fu) = &self.fuse {
            fu.visit(&join(prefix, "fuse"), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>)) {
        self.main.visit_mut(&join(prefix, "main"), f);
        self.bg.visit_mut(&join(prefix, "bg"), f);
        self.pre.visit_mut(&join(prefix, "pre"), f);
        if let Some(fu) = &mut self.fuse {
            fu.visit_mut(&join(prefix, "fuse"), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}
