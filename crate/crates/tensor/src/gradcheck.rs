//! Central finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::error::Result;
use crate::kernels::conv::ConvGeometry;
use crate::kernels::loss::Labels;
use crate::kernels::norm::{NormMode, RunningStats};
use crate::kernels::resample::UpsampleMode;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing one analytic gradient entry to its numeric estimate.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|)`, or zero when both are below `floor`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let diff = (self.analytic - self.numeric).abs();
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < floor {
            0.0
        } else {
            diff / scale
        }
    }
}

/// Estimates `d f / d x[i]` for every `i` in `indices` by central differences
/// with step `h`, and pairs each with `analytic[i]`.
pub fn probe(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Vec<Probe> {
    let mut work = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = work.data()[i];
            work.data_mut()[i] = orig + h;
            let plus = f(&work);
            work.data_mut()[i] = orig - h;
            let minus = f(&work);
            work.data_mut()[i] = orig;
            Probe {
                index: i,
                analytic: analytic.data()[i],
                numeric: (plus - minus) / (2.0 * h),
            }
        })
        .collect()
}

/// Largest relative error over `probes`.
pub fn max_rel_error(probes: &[Probe], floor: f64) -> f64 {
    probes.iter().map(|p| p.rel_error(floor)).fold(0.0, f64::max)
}

/// Central-difference step used by the op suite.
pub const OP_STEP: f64 = 1e-4;
/// Gradients below this magnitude are not compared.
pub const OP_FLOOR: f64 = 1e-8;
/// Entries probed per input tensor.
const OP_PROBES: usize = 48;

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One randomized instance of a differentiable op: its inputs and a forward
/// closure over the tape.
pub struct OpCase {
    pub inputs: Vec<Tensor<f64>>,
    pub forward: Forward,
}

/// Generator of random cases for one op.
pub type OpGenerator = fn(&mut dyn RngCore) -> OpCase;

fn loss_of(case: &OpCase, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = (case.forward)(&mut tape, &vars).expect("case forward");
    if tape.value(y).len() == 1 {
        return tape.value(y).data()[0];
    }
    let l = tape.dot_const(y, proj).expect("projection");
    tape.value(l).data()[0]
}

/// Worst relative error over every input of one case. Non-scalar outputs are
/// reduced by a random projection so every output entry contributes.
pub fn check_case(case: &OpCase, mut rng: &mut dyn RngCore) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = (case.forward)(&mut tape, &vars).expect("case forward");
    let proj = Tensor::<f64>::randn(tape.value(y).shape().to_vec(), 1.0, &mut rng);
    let l = if tape.value(y).len() == 1 { y } else { tape.dot_const(y, &proj).expect("projection") };
    let grads = tape.backward(l).expect("backward");

    let mut worst = 0.0f64;
    for (i, (&v, x)) in vars.iter().zip(&case.inputs).enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(OP_PROBES);
        let probes = probe(x, &analytic, &idx, OP_STEP, |xp| {
            let mut inputs = case.inputs.clone();
            inputs[i] = xp.clone();
            loss_of(case, &inputs, &proj)
        });
        worst = worst.max(max_rel_error(&probes, OP_FLOOR));
    }
    worst
}

/// Worst relative error over `cases` random instances from `generator`.
pub fn check_op(generator: OpGenerator, cases: usize, rng: &mut dyn RngCore) -> f64 {
    (0..cases)
        .map(|_| {
            let case = generator(rng);
            check_case(&case, rng)
        })
        .fold(0.0, f64::max)
}

/// Values kept away from zero so ReLU kinks are never straddled.
fn away_from_zero(shape: [usize; 4], rng: &mut dyn RngCore) -> Tensor<f64> {
    let mut rng = rng;
    Tensor::<f64>::randn(shape, 1.0, &mut rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Distinct values with gaps far larger than the difference step, so pooling
/// windows never tie.
fn distinct(shape: [usize; 4], rng: &mut dyn RngCore) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).expect("shape matches")
}

fn dims(rng: &mut dyn RngCore, lo: usize, hi: usize) -> [usize; 4] {
    [
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut dyn RngCore) -> Tensor<f64> {
    let mut rng = rng;
    Tensor::randn(shape, std, &mut rng)
}

fn conv2d_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, cin, h, w] = dims(rng, 5, 9);
    let cout = rng.random_range(1..4);
    let k = rng.random_range(1..4);
    // Dilation 2 with a 3-wide kernel spans 5 pixels, which every input covers.
    let g = ConvGeometry::new(rng.random_range(1..3), rng.random_range(0..2), rng.random_range(1..3));
    let mut inputs = vec![randn([n, cin, h, w], 1.0, rng), randn([cout, cin, k, k], 1.0, rng)];
    if rng.random_bool(0.5) {
        inputs.push(randn([cout], 1.0, rng));
    }
    OpCase {
        inputs,
        forward: Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), g)),
    }
}

fn conv2d_transpose_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, cin, h, w] = dims(rng, 2, 5);
    let cout = rng.random_range(1..4);
    let (k, stride, pad) = [(4, 2, 1), (3, 1, 1), (3, 2, 0), (2, 2, 0)][rng.random_range(0..4)];
    OpCase {
        inputs: vec![
            randn([n, cin, h, w], 1.0, rng),
            randn([cin, cout, k, k], 1.0, rng),
            randn([cout], 1.0, rng),
        ],
        forward: Box::new(move |t, v| t.conv2d_transpose(v[0], v[1], Some(v[2]), stride, pad)),
    }
}

fn relu_case(rng: &mut dyn RngCore) -> OpCase {
    let s = dims(rng, 1, 6);
    OpCase {
        inputs: vec![away_from_zero(s, rng)],
        forward: Box::new(|t, v| t.relu(v[0])),
    }
}

fn add_scale_case(rng: &mut dyn RngCore) -> OpCase {
    let s = dims(rng, 1, 6);
    OpCase {
        inputs: vec![randn(s, 1.0, rng), randn(s, 1.0, rng)],
        forward: Box::new(|t, v| {
            let a = t.scale(v[0], 0.7)?;
            t.add(a, v[1])
        }),
    }
}

fn concat_slice_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, c1, h, w] = dims(rng, 1, 5);
    let c2 = rng.random_range(1..4);
    let start = rng.random_range(0..c1 + c2);
    let len = rng.random_range(1..=c1 + c2 - start);
    OpCase {
        inputs: vec![randn([n, c1, h, w], 1.0, rng), randn([n, c2, h, w], 1.0, rng)],
        forward: Box::new(move |t, v| {
            let c = t.concat_channels(&[v[0], v[1]])?;
            t.slice_channels(c, start, len)
        }),
    }
}

fn batch_norm_train_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, c, h, w] = dims(rng, 2, 5);
    OpCase {
        inputs: vec![randn([n, c, h, w], 2.0, rng), randn([c], 1.0, rng), randn([c], 1.0, rng)],
        forward: Box::new(move |t, v| {
            let mut stats = RunningStats::new(c);
            t.batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Train)
        }),
    }
}

fn batch_norm_inference_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, c, h, w] = dims(rng, 1, 5);
    let mut stats = RunningStats::new(c);
    stats.mean = randn([c], 1.0, rng);
    let mut r = &mut *rng;
    stats.var = Tensor::uniform([c], 0.5, 2.0, &mut r);
    OpCase {
        inputs: vec![randn([n, c, h, w], 1.0, rng), randn([c], 1.0, rng), randn([c], 1.0, rng)],
        forward: Box::new(move |t, v| {
            let mut s = stats.clone();
            t.batch_norm(v[0], v[1], v[2], &mut s, NormMode::Inference)
        }),
    }
}

fn max_pool_case(rng: &mut dyn RngCore) -> OpCase {
    let s = dims(rng, 2, 8);
    OpCase {
        inputs: vec![distinct(s, rng)],
        forward: Box::new(|t, v| t.max_pool2d(v[0], 3, 2, 1)),
    }
}

fn gap_case(rng: &mut dyn RngCore) -> OpCase {
    let s = dims(rng, 1, 7);
    OpCase {
        inputs: vec![randn(s, 1.0, rng)],
        forward: Box::new(|t, v| t.global_avg_pool(v[0])),
    }
}

fn upsample_bilinear_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, c, h, w] = dims(rng, 1, 5);
    let (th, tw) = (h + rng.random_range(0..6), w + rng.random_range(0..6));
    OpCase {
        inputs: vec![randn([n, c, h, w], 1.0, rng)],
        forward: Box::new(move |t, v| t.upsample(v[0], th, tw, UpsampleMode::Bilinear)),
    }
}

fn upsample_tile_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, c, _, _] = dims(rng, 1, 2);
    let (th, tw) = (rng.random_range(1..6), rng.random_range(1..6));
    OpCase {
        inputs: vec![randn([n, c, 1, 1], 1.0, rng)],
        forward: Box::new(move |t, v| t.upsample(v[0], th, tw, UpsampleMode::Tile)),
    }
}

fn softmax_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, _, h, w] = dims(rng, 1, 5);
    let c = rng.random_range(2..4);
    OpCase {
        inputs: vec![randn([n, c, h, w], 2.0, rng)],
        forward: Box::new(|t, v| t.softmax_channel(v[0])),
    }
}

fn softmax_ce_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, _, h, w] = dims(rng, 1, 5);
    let mut data: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..2)).collect();
    data[0] = 1;
    if data.len() > 1 {
        data[1] = 255;
    }
    let labels = Labels::new([n, h, w], data).expect("label shape");
    OpCase {
        inputs: vec![randn([n, 2, h, w], 2.0, rng)],
        forward: Box::new(move |t, v| t.softmax_ce_loss(v[0], &labels, 255)),
    }
}

fn l2_case(rng: &mut dyn RngCore) -> OpCase {
    let s = dims(rng, 1, 5);
    let target = randn(s, 1.0, rng);
    OpCase {
        inputs: vec![randn(s, 1.0, rng)],
        forward: Box::new(move |t, v| t.l2_loss(v[0], &target)),
    }
}

fn layout_case(rng: &mut dyn RngCore) -> OpCase {
    let [n, c, h, w] = dims(rng, 2, 6);
    let times = rng.random_range(1..4);
    let (ph, pw) = (rng.random_range(0..3), rng.random_range(0..3));
    let (ch, cw) = (rng.random_range(1..=h), rng.random_range(1..=w));
    OpCase {
        inputs: vec![randn([n, c, h, w], 1.0, rng)],
        forward: Box::new(move |t, v| {
            let r = t.repeat_batch(v[0], times)?;
            let r = t.reshape(r, &[n, times * c, h, w])?;
            let p = t.pad_bottom_right(r, ph, pw)?;
            t.crop_top_left(p, ch, cw)
        }),
    }
}

/// Every differentiable tape op with its case generator.
pub fn op_suite() -> Vec<(&'static str, OpGenerator)> {
    vec![
        ("conv2d", conv2d_case),
        ("conv2d_transpose", conv2d_transpose_case),
        ("relu", relu_case),
        ("add_scale", add_scale_case),
        ("concat_slice", concat_slice_case),
        ("batch_norm_train", batch_norm_train_case),
        ("batch_norm_inference", batch_norm_inference_case),
        ("max_pool", max_pool_case),
        ("global_avg_pool", gap_case),
        ("upsample_bilinear", upsample_bilinear_case),
        ("upsample_tile", upsample_tile_case),
        ("softmax", softmax_case),
        ("softmax_ce", softmax_ce_case),
        ("l2", l2_case),
        ("repeat_reshape_pad_crop", layout_case),
    ]
}
