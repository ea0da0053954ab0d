//! ResNet-18-shaped feature extractor with structured filter pruning.
//!
//! Channel bookkeeping: every residual add joins tensors from the same
//! *channel group*. Group 0 is the stem output; a new group starts at each
//! stage whose first block needs a projection shortcut. All convs writing
//! into a group are pruned together so adds stay well-formed. The first conv
//! of each block writes a private *mid* channel set pruned on its own.

use bgcut_tensor::{ConvGeometry, NormMode, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{BgError, Result};
use crate::nn::{join, ConvBn, Module, Slot, SlotMut};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    /// 8 or 16.
    pub output_stride: usize,
    pub dilation_per_stage: [usize; 4],
    pub input_size_hint: (usize, usize),
}

impl Default for BackboneConfig {
    /// Quarter-width ResNet-18 at output stride 8.
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [2, 2, 2, 2],
            output_stride: 8,
            dilation_per_stage: [1, 1, 2, 4],
            input_size_hint: (97, 97),
        }
    }
}

impl BackboneConfig {
    /// Full-width ResNet-18 channels.
    pub fn resnet18() -> Self {
        Self {
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BgError::Config(format!("backbone: {m}")));
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.dilation_per_stage.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if !matches!(self.output_stride, 8 | 16) {
            return bad(format!("output stride {} (expected 8 or 16)", self.output_stride));
        }
        Ok(())
    }

    /// Stride of each stage's first block; the stem contributes 4.
    pub fn stage_strides(&self) -> [usize; 4] {
        match self.output_stride {
            8 => [1, 2, 1, 1],
            _ => [1, 2, 2, 1],
        }
    }

    /// Feature map extent for an input extent.
    pub fn feature_extent(&self, input: usize) -> usize {
        input.div_ceil(self.output_stride)
    }

    fn stage_input_channels(&self, s: usize) -> usize {
        if s == 0 {
            self.stem_channels
        } else {
            self.stage_channels[s - 1]
        }
    }

    fn needs_projection(&self, s: usize) -> bool {
        self.stage_strides()[s] != 1 || self.stage_input_channels(s) != self.stage_channels[s]
    }

    /// Channel group written by each stage, and the group count.
    pub fn stage_groups(&self) -> ([usize; 4], usize) {
        let mut g = 0;
        let mut out = [0; 4];
        for (s, slot) in out.iter_mut().enumerate() {
            if self.needs_projection(s) {
                g += 1;
            }
            *slot = g;
        }
        (out, g + 1)
    }

    /// Unpruned channel count of each group.
    pub fn group_channels(&self) -> Vec<usize> {
        let (groups, count) = self.stage_groups();
        let mut widths = vec![self.stem_channels; count];
        for s in 0..4 {
            widths[groups[s]] = self.stage_channels[s];
        }
        widths
    }
}

/// Original channel indices that survive pruning, per group and per block mid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMasks {
    pub groups: Vec<Vec<u32>>,
    pub mids: Vec<Vec<Vec<u32>>>,
}

impl ChannelMasks {
    pub fn full(config: &BackboneConfig) -> Self {
        let iota = |n: usize| (0..n as u32).collect::<Vec<_>>();
        Self {
            groups: config.group_channels().into_iter().map(iota).collect(),
            mids: (0..4)
                .map(|s| vec![iota(config.stage_channels[s]); config.blocks_per_stage[s]])
                .collect(),
        }
    }

    fn matches(&self, config: &BackboneConfig) -> bool {
        self.groups.len() == config.stage_groups().1
            && self.groups.iter().all(|g| !g.is_empty())
            && self.mids.len() == 4
            && (0..4).all(|s| {
                self.mids[s].len() == config.blocks_per_stage[s] && self.mids[s].iter().all(|m| !m.is_empty())
            })
    }
}

#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub conv1: ConvBn<T>,
    pub conv2: ConvBn<T>,
    pub shortcut: Option<ConvBn<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Var> {
        let h = self.conv1.forward(tape, x, mode)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h, mode)?;
        let skip = match &mut self.shortcut {
            Some(p) => p.forward(tape, x, mode)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.relu(y)?)
    }
}

impl<T: Scalar> Module<T> for BasicBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(p) = &self.shortcut {
            p.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(p) = &mut self.shortcut {
            p.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    config: BackboneConfig,
    masks: ChannelMasks,
    pub stem: ConvBn<T>,
    pub stages: Vec<Vec<BasicBlock<T>>>,
}

/// Kept indices (into the pre-step channels) of the backbone's output group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneStep {
    pub output_keep: Vec<usize>,
}

/// Number of filters kept out of `c` at `keep_ratio`: `ceil(keep_ratio * c)`.
/// The small slack absorbs binary representation error in the ratio.
pub fn kept_count(c: usize, keep_ratio: f64) -> usize {
    ((keep_ratio * c as f64 - 1e-9).ceil() as usize).clamp(1, c)
}

/// Per-filter L1 norms of a `[Cout, ...]` weight tensor.
pub fn filter_l1<T: Scalar>(w: &Tensor<T>) -> Vec<f64> {
    let per = w.len() / w.shape()[0];
    w.data()
        .chunks(per)
        .map(|f| f.iter().map(|v| v.as_f64().abs()).sum())
        .collect()
}

/// Indices sorted ascending by score; ties keep the lower index first.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Filters of a `[Cout, Cin, kh, kw]` weight in pruning order (weakest first).
pub fn rank_filters<T: Scalar>(w: &Tensor<T>) -> Vec<usize> {
    rank_by_score(&filter_l1(w))
}

/// The `keep` strongest channels by score, in ascending index order.
pub fn select_strongest(scores: &[f64], keep: usize) -> Vec<usize> {
    let order = rank_by_score(scores);
    let mut kept = order[order.len() - keep..].to_vec();
    kept.sort_unstable();
    kept
}

fn geometry(stride: usize, dilation: usize, k: usize) -> ConvGeometry {
    ConvGeometry::new(stride, dilation * (k / 2), dilation)
}

impl<T: Scalar> Backbone<T> {
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        let masks = ChannelMasks::full(&config);
        Self::with_masks(config, masks, seed)
    }

    /// Builds the (possibly pruned) structure described by `masks`.
    pub fn with_masks(config: BackboneConfig, masks: ChannelMasks, seed: u64) -> Result<Self> {
        config.validate()?;
        if !masks.matches(&config) {
            return Err(BgError::Config("channel masks do not fit the backbone config".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (groups, _) = config.stage_groups();
        let width = |g: usize| masks.groups[g].len();
        let stem = ConvBn::he(3, width(0), 7, ConvGeometry::new(2, 3, 1), &mut rng);
        let strides = config.stage_strides();
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let in_group = if s == 0 { 0 } else { groups[s - 1] };
            let out = width(groups[s]);
            let d = config.dilation_per_stage[s];
            let mut blocks = Vec::with_capacity(config.blocks_per_stage[s]);
            for b in 0..config.blocks_per_stage[s] {
                let (cin, stride) = if b == 0 { (width(in_group), strides[s]) } else { (out, 1) };
                let mid = masks.mids[s][b].len();
                let shortcut = (b == 0 && config.needs_projection(s))
                    .then(|| ConvBn::he(cin, out, 1, ConvGeometry::new(stride, 0, 1), &mut rng));
                blocks.push(BasicBlock {
                    conv1: ConvBn::he(cin, mid, 3, geometry(stride, d, 3), &mut rng),
                    conv2: ConvBn::he(mid, out, 3, geometry(1, d, 3), &mut rng),
                    shortcut,
                });
            }
            stages.push(blocks);
        }
        let net = Self {
            config,
            masks,
            stem,
            stages,
        };
        net.check_consistency()?;
        Ok(net)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn masks(&self) -> &ChannelMasks {
        &self.masks
    }

    pub fn out_channels(&self) -> usize {
        self.masks.groups[self.config.stage_groups().0[3]].len()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Var> {
        let h = self.stem.forward(tape, x, mode)?;
        let h = tape.relu(h)?;
        let mut h = tape.max_pool2d(h, 3, 2, 1)?;
        for stage in &mut self.stages {
            for block in stage {
                h = block.forward(tape, h, mode)?;
            }
        }
        Ok(h)
    }

    /// Inference-mode features without gradient bookkeeping.
    pub fn features(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let y = self.forward(&mut tape, v, NormMode::Inference)?;
        Ok(tape.value(y).clone())
    }

    /// Output-channel count of every conv, in forward order.
    pub fn filter_counts(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem".to_string(), self.stem.out_channels())];
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                let p = format!("s{s}b{b}");
                out.push((format!("{p}.conv1"), blk.conv1.out_channels()));
                out.push((format!("{p}.conv2"), blk.conv2.out_channels()));
                if let Some(sc) = &blk.shortcut {
                    out.push((format!("{p}.shortcut"), sc.out_channels()));
                }
            }
        }
        out
    }

    /// Asserts every producer/consumer channel edge and every add agree.
    pub fn check_consistency(&self) -> Result<()> {
        let fail = |m: String| Err(BgError::Config(format!("channel consistency: {m}")));
        let cb_ok = |cb: &ConvBn<T>| cb.bn.channels() == cb.conv.out_channels();
        if self.stem.conv.in_channels() != 3 || !cb_ok(&self.stem) {
            return fail("stem".into());
        }
        let mut c = self.stem.out_channels();
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                let at = format!("stage {s} block {b}");
                if blk.conv1.conv.in_channels() != c {
                    return fail(format!("{at}: conv1 expects {} inputs, producer has {c}", blk.conv1.conv.in_channels()));
                }
                if blk.conv2.conv.in_channels() != blk.conv1.out_channels() {
                    return fail(format!("{at}: conv2 inputs"));
                }
                if !cb_ok(&blk.conv1) || !cb_ok(&blk.conv2) {
                    return fail(format!("{at}: batch-norm width"));
                }
                let skip = match &blk.shortcut {
                    Some(sc) => {
                        if sc.conv.in_channels() != c || !cb_ok(sc) {
                            return fail(format!("{at}: shortcut"));
                        }
                        sc.out_channels()
                    }
                    None => c,
                };
                if skip != blk.conv2.out_channels() {
                    return fail(format!("{at}: add joins {skip} and {} channels", blk.conv2.out_channels()));
                }
                c = skip;
            }
        }
        if c != self.out_channels() {
            return fail("output group width".into());
        }
        Ok(())
    }

    /// Summed per-filter L1 over every conv writing into each group.
    fn group_scores(&self) -> Vec<Vec<f64>> {
        let (groups, _) = self.config.stage_groups();
        let mut scores: Vec<Vec<f64>> = self.masks.groups.iter().map(|m| vec![0.0; m.len()]).collect();
        let mut add = |g: usize, w: &Tensor<T>| {
            for (acc, v) in scores[g].iter_mut().zip(filter_l1(w)) {
                *acc += v;
            }
        };
        add(0, self.stem.conv.weight.value());
        for (s, stage) in self.stages.iter().enumerate() {
            for blk in stage {
                add(groups[s], blk.conv2.conv.weight.value());
                if let Some(sc) = &blk.shortcut {
                    add(groups[s], sc.conv.weight.value());
                }
            }
        }
        scores
    }

    /// Keeps `ceil(keep_ratio * C)` filters in every prunable conv and rewires
    /// consumers. The caller must slice its own consumers of the output group
    /// with the returned indices.
    pub fn prune_step(&mut self, keep_ratio: f64) -> Result<PruneStep> {
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(BgError::Config(format!("keep ratio {keep_ratio} outside (0, 1]")));
        }
        let (groups, _) = self.config.stage_groups();
        let group_keep: Vec<Vec<usize>> = self
            .group_scores()
            .iter()
            .map(|sc| select_strongest(sc, kept_count(sc.len(), keep_ratio)))
            .collect();

        self.stem.select_outputs(&group_keep[0])?;
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let gin = if s == 0 { 0 } else { groups[s - 1] };
            let gout = groups[s];
            for (b, blk) in stage.iter_mut().enumerate() {
                let input_keep = if b == 0 { &group_keep[gin] } else { &group_keep[gout] };
                let w1 = blk.conv1.conv.weight.value();
                let mid_keep = select_strongest(&filter_l1(w1), kept_count(w1.shape()[0], keep_ratio));
                blk.conv1.conv.select_inputs(input_keep)?;
                blk.conv1.select_outputs(&mid_keep)?;
                blk.conv2.conv.select_inputs(&mid_keep)?;
                blk.conv2.select_outputs(&group_keep[gout])?;
                if let Some(sc) = &mut blk.shortcut {
                    sc.conv.select_inputs(input_keep)?;
                    sc.select_outputs(&group_keep[gout])?;
                }
                let m = &mut self.masks.mids[s][b];
                *m = mid_keep.iter().map(|&i| m[i]).collect();
            }
        }
        for (m, keep) in self.masks.groups.iter_mut().zip(&group_keep) {
            *m = keep.iter().map(|&i| m[i]).collect();
        }
        self.check_consistency()?;
        Ok(PruneStep {
            output_keep: group_keep[groups[3]].clone(),
        })
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str) {
        archive.put_json(join(prefix, "config"), &self.config);
        for (g, m) in self.masks.groups.iter().enumerate() {
            archive.put_u32s(join(prefix, &format!("mask.group{g}")), m);
        }
        for (s, stage) in self.masks.mids.iter().enumerate() {
            for (b, m) in stage.iter().enumerate() {
                archive.put_u32s(join(prefix, &format!("mask.s{s}b{b}")), m);
            }
        }
        archive.put_module(prefix, self);
    }

    pub fn load_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let config: BackboneConfig = archive.json(&join(prefix, "config"))?;
        config.validate()?;
        let (_, ngroups) = config.stage_groups();
        let groups = (0..ngroups)
            .map(|g| archive.u32s(&join(prefix, &format!("mask.group{g}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let mids = (0..4)
            .map(|s| {
                (0..config.blocks_per_stage[s])
                    .map(|b| archive.u32s(&join(prefix, &format!("mask.s{s}b{b}"))))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut net = Self::with_masks(config, ChannelMasks { groups, mids }, 0)?;
        archive.load_module(prefix, &mut net)?;
        Ok(net)
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, blk) in stage.iter().enumerate() {
                blk.visit(&join(prefix, &format!("s{s}b{b}")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, blk) in stage.iter_mut().enumerate() {
                blk.visit_mut(&join(prefix, &format!("s{s}b{b}")), f);
            }
        }
    }
}
