use bgcut::attenuation::{AttenuationConfig, AttenuationModel, SegNet, SegNetConfig};
use bgcut::frame::frames_to_tensor;
use bgcut::pipeline::bench::pattern_frame;
use bgcut::prune::{Prunable, PruneSchedule};
use bgcut::refinement::{RefinementConfig, RefinementNet, ScoreStack};
use bgcut::tensor::parallel::with_parallel;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

const SIZE: usize = 128;

/// Untrained weights: latency depends only on the filter counts.
fn segnet_forward(c: &mut Criterion) {
    let x = frames_to_tensor::<f32>(&[&pattern_frame(SIZE, SIZE, 0)]).unwrap();
    let mut full = SegNet::<f32>::build(SegNetConfig::default(), 0).unwrap();
    let mut pruned = full.clone();
    let schedule = PruneSchedule::default();
    for _ in 0..schedule.num_steps {
        pruned.prune_step(schedule.step_keep_ratio).unwrap();
    }
    let mut group = c.benchmark_group("segnet_128px");
    group.sample_size(20);
    for (name, model) in [("unpruned", &mut full), ("pruned", &mut pruned)] {
        for (mode, on) in [("parallel", true), ("sequential", false)] {
            group.bench_function(BenchmarkId::new(name, mode), |b| {
                b.iter(|| with_parallel(on, || model.infer(black_box(&x)).unwrap()))
            });
        }
    }
    group.finish();
}

fn stages(c: &mut Criterion) {
    let frame = pattern_frame(SIZE, SIZE, 0);
    let mut att = AttenuationModel::<f32>::build(SegNetConfig::default(), AttenuationConfig::default(), 0).unwrap();
    let bg = att.compute_bg_global_feature(&[pattern_frame(SIZE, SIZE, 1)]).unwrap();
    let mut refine = RefinementNet::<f32>::build(RefinementConfig::default(), 0).unwrap();
    let scores = att.forward(&frame, &bg, 0).unwrap();
    let window = refine.config().window();
    let mut group = c.benchmark_group("stages_128px");
    group.sample_size(20);
    for (mode, on) in [("parallel", true), ("sequential", false)] {
        group.bench_function(BenchmarkId::new("attenuation", mode), |b| {
            b.iter(|| with_parallel(on, || att.forward(black_box(&frame), &bg, 0).unwrap()))
        });
        group.bench_function(BenchmarkId::new("refinement", mode), |b| {
            b.iter(|| {
                let stack = ScoreStack {
                    scores: vec![&scores; window],
                    guidance: vec![&frame; window],
                    center_index: 0,
                };
                with_parallel(on, || refine.refine(black_box(&stack)).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, segnet_forward, stages);
criterion_main!(benches);
