//! Iterative prune-and-finetune schedule.

use std::time::Instant;

use bgcut_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{BgError, Result};
use crate::attenuation::SegNet;
use crate::frame::{Frame, Mask};
use crate::nn::Module;
use crate::train::{Stage1Trainer, TrainConfig};

/// A model whose backbone filters can be pruned in place.
pub trait Prunable<T: Scalar>: Module<T> {
    /// Keeps `ceil(keep_ratio * C)` filters in every prunable conv.
    fn prune_step(&mut self, keep_ratio: f64) -> Result<()>;
    /// Output-filter count of every prunable conv.
    fn filter_counts(&self) -> Vec<(String, usize)>;
    /// Inference forward used for latency measurement.
    fn infer(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSchedule {
    pub step_keep_ratio: f64,
    pub num_steps: usize,
    pub finetune_iters_per_step: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            step_keep_ratio: 0.9,
            num_steps: 15,
            finetune_iters_per_step: 20,
        }
    }
}

impl PruneSchedule {
    /// `step_keep_ratio ^ num_steps`.
    pub fn retained_fraction(&self) -> f64 {
        self.step_keep_ratio.powi(self.num_steps as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_keep_ratio > 0.0 && self.step_keep_ratio <= 1.0) {
            return Err(BgError::Config(format!("keep ratio {} outside (0, 1]", self.step_keep_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneStepRecord {
    pub step: usize,
    /// `(layer, before, after)` filter counts.
    pub filters: Vec<(String, usize, usize)>,
    pub params_before: usize,
    pub params_after: usize,
    /// Mean fine-tuning loss, if fine-tuning ran.
    pub finetune_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub schedule: PruneSchedule,
    pub steps: Vec<PruneStepRecord>,
    pub params_initial: usize,
    pub params_final: usize,
    /// Filter totals over all prunable convs.
    pub filters_initial: usize,
    pub filters_final: usize,
    pub latency_ms_before: Option<f64>,
    pub latency_ms_after: Option<f64>,
    /// Set when fine-tuning reported a non-finite loss.
    pub aborted_at: Option<usize>,
}

impl PruneReport {
    pub fn filter_fraction(&self) -> f64 {
        self.filters_final as f64 / self.filters_initial as f64
    }

    pub fn latency_ratio(&self) -> Option<f64> {
        Some(self.latency_ms_after? / self.latency_ms_before?)
    }
}

/// Median wall-clock milliseconds of `runs` inference passes after one warmup.
pub fn measure_latency_ms<T: Scalar, M: Prunable<T>>(model: &mut M, x: &Tensor<T>, runs: usize) -> Result<f64> {
    model.infer(x)?;
    let mut times = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        std::hint::black_box(model.infer(x)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Runs `num_steps` rounds of prune then fine-tune. `finetune` receives the
/// step index and returns its mean loss. `latency_input` enables timing.
pub fn prune_to_target<T, M, F>(
    model: &mut M,
    schedule: &PruneSchedule,
    mut finetune: F,
    latency_input: Option<&Tensor<T>>,
) -> Result<PruneReport>
where
    T: Scalar,
    M: Prunable<T>,
    F: FnMut(&mut M, usize) -> Result<f64>,
{
    schedule.validate()?;
    let total = |m: &M| m.filter_counts().iter().map(|(_, c)| c).sum::<usize>();
    let latency_ms_before = latency_input.map(|x| measure_latency_ms(model, x, 5)).transpose()?;
    let mut report = PruneReport {
        schedule: schedule.clone(),
        steps: Vec::with_capacity(schedule.num_steps),
        params_initial: model.num_params(),
        params_final: model.num_params(),
        filters_initial: total(model),
        filters_final: total(model),
        latency_ms_before,
        latency_ms_after: latency_ms_before,
        aborted_at: None,
    };
    for step in 0..schedule.num_steps {
        let before = model.filter_counts();
        let params_before = model.num_params();
        model.prune_step(schedule.step_keep_ratio)?;
        let after = model.filter_counts();
        let finetune_loss = if schedule.finetune_iters_per_step > 0 {
            Some(finetune(model, step)?)
        } else {
            None
        };
        report.steps.push(PruneStepRecord {
            step,
            filters: before
                .into_iter()
                .zip(after)
                .map(|((name, b), (_, a))| (name, b, a))
                .collect(),
            params_before,
            params_after: model.num_params(),
            finetune_loss,
        });
        if finetune_loss.is_some_and(|l| !l.is_finite()) {
            report.aborted_at = Some(step);
            break;
        }
    }
    report.params_final = model.num_params();
    report.filters_final = total(model);
    report.latency_ms_after = latency_input.map(|x| measure_latency_ms(model, x, 5)).transpose()?;
    Ok(report)
}

/// Prunes a stage-1 network, fine-tuning with the stage-1 loss for
/// `finetune_iters_per_step` iterations after every step. The poly schedule
/// spans all fine-tuning iterations.
pub fn prune_segnet(
    model: &mut SegNet<f32>,
    data: &[(Frame, Mask)],
    config: &TrainConfig,
    schedule: &PruneSchedule,
    latency_input: Option<&Tensor<f32>>,
) -> Result<PruneReport> {
    let total = schedule.num_steps * schedule.finetune_iters_per_step;
    let cfg = TrainConfig {
        max_iterations: Some(total.max(1)),
        ..config.clone()
    };
    let mut trainer = Stage1Trainer::new(data, cfg)?;
    prune_to_target(
        model,
        schedule,
        |m, _| {
            let mut sum = 0.0;
            for _ in 0..schedule.finetune_iters_per_step {
                sum += trainer.step(m)?.loss;
            }
            Ok(sum / schedule.finetune_iters_per_step as f64)
        },
        latency_input,
    )
}
