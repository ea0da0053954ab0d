//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use bgcut::attenuation::{AttenuationConfig, AttenuationModel, SegNetConfig};
use bgcut::backbone::BackboneConfig;
use bgcut::nn::{Module, Slot, SlotMut};
use bgcut::refinement::{RefinementConfig, RefinementNet};
use bgcut::tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A narrow backbone that keeps every structural feature of the default one.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stem_channels: 4,
        stage_channels: [4, 6, 6, 8],
        blocks_per_stage: [1, 1, 1, 1],
        ..BackboneConfig::default()
    }
}

pub fn tiny_segnet() -> SegNetConfig {
    SegNetConfig {
        backbone: tiny_backbone(),
        seg_channels: Some(6),
    }
}

pub fn tiny_attenuation<T: Scalar>(seed: u64) -> AttenuationModel<T> {
    AttenuationModel::build(
        tiny_segnet(),
        AttenuationConfig {
            fuse_channels: 5,
            attenuation: true,
        },
        seed,
    )
    .unwrap()
}

pub fn tiny_refinement<T: Scalar>(n: usize, seed: u64) -> RefinementNet<T> {
    RefinementNet::build(
        RefinementConfig {
            n,
            encoder_channels: [4, 6, 8],
            ..RefinementConfig::default()
        },
        seed,
    )
    .unwrap()
}

/// Overwrites every parameter with fresh draws so no layer starts at zero.
pub fn randomize<T: Scalar, M: Module<T>>(m: &mut M, std: f64, rng: &mut ChaCha8Rng) {
    m.visit_mut("", &mut |_, s| {
        if let SlotMut::Param(p) = s {
            let shape = p.value().shape().to_vec();
            p.set(Tensor::randn(shape, std, rng));
        }
    });
}

/// Worst relative error between the tape gradient and central differences
/// over `probes` random parameter entries of `model`.
pub fn module_gradcheck<M: Module<f64>>(
    model: &mut M,
    probes: usize,
    rng: &mut ChaCha8Rng,
    mut loss: impl FnMut(&mut M, &mut Tape<f64>) -> Var,
) -> f64 {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-7;
    model.zero_grad();
    let mut tape = Tape::new();
    let l = loss(model, &mut tape);
    let grads = tape.backward(l).unwrap();
    model.absorb(&grads);

    let mut entries: Vec<(String, usize, f64)> = Vec::new();
    model.visit("", &mut |name, s| {
        if let Slot::Param(p) = s {
            for (i, &g) in p.var.grad.data().iter().enumerate() {
                entries.push((name.clone(), i, g));
            }
        }
    });
    let mut eval = |model: &mut M, name: &str, i: usize, delta: f64| {
        nudge(model, name, i, delta);
        let mut tape = Tape::new();
        let l = loss(model, &mut tape);
        let v = tape.value(l).data()[0];
        nudge(model, name, i, -delta);
        v
    };
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let (name, i, analytic) = entries[rng.random_range(0..entries.len())].clone();
        let numeric = (eval(model, &name, i, STEP) - eval(model, &name, i, -STEP)) / (2.0 * STEP);
        let scale = analytic.abs().max(numeric.abs());
        if scale > FLOOR {
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

fn nudge<M: Module<f64>>(model: &mut M, name: &str, i: usize, delta: f64) {
    model.visit_mut("", &mut |n, s| {
        if let SlotMut::Param(p) = s {
            if n == name {
                p.var.value.data_mut()[i] += delta;
            }
        }
    });
}

/// Bitwise equality of two float tensors.
pub fn bits_equal<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

/// Uniformly random RGB frame.
pub fn random_frame(width: usize, height: usize, rng: &mut ChaCha8Rng) -> bgcut::frame::Frame {
    let data = (0..width * height * 3).map(|_| rng.random()).collect();
    bgcut::frame::Frame::new(width, height, data).unwrap()
}
