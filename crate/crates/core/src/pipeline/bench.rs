use std::time::Instant;

use bgcut_tensor::{parallel, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::attenuation::ScoreMap;
use crate::backbone::Backbone;
use crate::error::Result;
use crate::frame::Frame;
use crate::pipeline::eval::LatencyStats;
use crate::pipeline::segment::Models;
use crate::refinement::ScoreStack;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Machine {
    pub arch: String,
    pub os: String,
    pub available_threads: usize,
    pub parallel: bool,
}

impl Machine {
    pub fn describe() -> Self {
        Self {
            arch: std::env::consts::ARCH.into(),
            os: std::env::consts::OS.into(),
            available_threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            parallel: parallel::parallel_enabled(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub iterations: usize,
    pub attenuation: Option<LatencyStats>,
    pub refinement: Option<LatencyStats>,
    pub machine: Machine,
}

/// A deterministic test pattern.
pub fn pattern_frame(height: usize, width: usize, phase: usize) -> Frame {
    let data = (0..height * width * 3)
        .map(|i| ((i * 37 + phase * 11) % 251) as u8)
        .collect();
    Frame { width, height, data }
}

fn time_ms<R>(f: impl FnOnce() -> Result<R>) -> Result<(f64, R)> {
    let t = Instant::now();
    let r = f()?;
    Ok((t.elapsed().as_secs_f64() * 1e3, r))
}

/// Per-frame wall-clock of each stage. `warmup` runs are excluded.
pub fn bench<T: Scalar>(
    models: &mut Models<T>,
    size: (usize, usize),
    iterations: usize,
    warmup: usize,
) -> Result<BenchReport> {
    let (h, w) = size;
    let frame = pattern_frame(h, w, 0);
    let bg = if models.attenuation.config().attenuation {
        models.attenuation.compute_bg_global_feature(&[pattern_frame(h, w, 1)])?
    } else {
        models.attenuation.null_feature()
    };
    let mut att = Vec::with_capacity(iterations);
    let mut refine = Vec::with_capacity(iterations);
    let window = models.refinement.as_ref().map_or(1, |r| r.config().window());
    for i in 0..warmup + iterations {
        let (ta, scores): (f64, ScoreMap<T>) = time_ms(|| models.attenuation.forward(&frame, &bg, 0))?;
        if let Some(r) = &mut models.refinement {
            let stack = ScoreStack {
                scores: vec![&scores; window],
                guidance: vec![&frame; window],
                center_index: 0,
            };
            let (tr, _) = time_ms(|| r.refine(&stack))?;
            if i >= warmup {
                refine.push(tr);
            }
        }
        if i >= warmup {
            att.push(ta);
        }
    }
    Ok(BenchReport {
        height: h,
        width: w,
        iterations,
        attenuation: LatencyStats::from_ms(&att),
        refinement: LatencyStats::from_ms(&refine),
        machine: Machine::describe(),
    })
}

/// Backbone-only inference latency samples in milliseconds.
pub fn bench_backbone<T: Scalar>(
    backbone: &mut Backbone<T>,
    size: (usize, usize),
    iterations: usize,
    warmup: usize,
) -> Result<Vec<f64>> {
    let x = Tensor::<T>::full([1, 3, size.0, size.1], T::lit(0.5));
    let mut out = Vec::with_capacity(iterations);
    for i in 0..warmup + iterations {
        let (t, _) = time_ms(|| backbone.features(&x))?;
        if i >= warmup {
            out.push(t);
        }
    }
    Ok(out)
}
