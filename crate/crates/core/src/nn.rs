//! Parameterized layers bound onto a [`Tape`] per forward pass.
//!
//! A layer registers its tensors as tape leaves during `forward`, remembers
//! the handles, and pulls the gradients back in [`Module::absorb`] after the
//! tape's backward pass.

use bgcut_tensor::{
    ConvGeometry, Gradients, NormMode, RunningStats, Scalar, Sgd, Tape, Tensor, Var, Variable,
};
use rand::Rng;

use crate::error::Result;

/// A trainable tensor plus the tape handles it was bound to.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub var: Variable<T>,
    bound: Vec<Var>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Self {
            var: Variable::new(value),
            bound: Vec::new(),
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.var.value
    }

    pub fn bind(&mut self, tape: &mut Tape<T>) -> Var {
        let v = tape.leaf(self.var.value.clone(), self.var.requires_grad);
        if tape.grad_enabled() {
            self.bound.push(v);
        }
        v
    }

    fn absorb(&mut self, grads: &Gradients<T>) {
        for v in self.bound.drain(..) {
            self.var.accumulate(grads.get(v));
        }
    }

    /// Replaces the value (used by pruning); resets the gradient.
    pub fn set(&mut self, value: Tensor<T>) {
        let requires_grad = self.var.requires_grad;
        self.var = Variable::new(value);
        self.var.requires_grad = requires_grad;
        self.bound.clear();
    }
}

/// Borrowed view of one named state tensor of a module.
pub enum Slot<'a, T> {
    Param(&'a Param<T>),
    Stats(&'a RunningStats<T>),
}

pub enum SlotMut<'a, T> {
    Param(&'a mut Param<T>),
    Stats(&'a mut RunningStats<T>),
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named traversal of every parameter and running-statistics buffer.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| {
            if let Slot::Param(p) = s {
                n += p.var.numel();
            }
        });
        n
    }

    /// Moves gradients from the tape into each parameter's accumulator.
    fn absorb(&mut self, grads: &Gradients<T>) {
        self.visit_mut("", &mut |_, s| {
            if let SlotMut::Param(p) = s {
                p.absorb(grads);
            }
        });
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, s| {
            if let SlotMut::Param(p) = s {
                p.var.zero_grad();
            }
        });
    }

    fn set_requires_grad(&mut self, on: bool) {
        self.visit_mut("", &mut |_, s| {
            if let SlotMut::Param(p) = s {
                p.var.requires_grad = on;
            }
        });
    }

    /// One SGD step over every trainable parameter; velocities keyed by `prefix`.
    fn sgd_step(&mut self, prefix: &str, opt: &mut Sgd<T>, lr: f64) -> Result<()> {
        let mut err = None;
        self.visit_mut(prefix, &mut |name, s| {
            if let SlotMut::Param(p) = s {
                if p.var.requires_grad && err.is_none() {
                    if let Err(e) = opt.step(&name, &mut p.var, lr) {
                        err = Some(e);
                    }
                }
            }
        });
        err.map_or(Ok(()), |e| Err(e.into()))
    }

    /// Order-sensitive CRC32 over names, shapes and values.
    fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        self.visit("", &mut |name, s| {
            h.update(name.as_bytes());
            let tensors: Vec<&Tensor<T>> = match s {
                Slot::Param(p) => vec![p.value()],
                Slot::Stats(st) => vec![&st.mean, &st.var],
            };
            for t in tensors {
                for &d in t.shape() {
                    h.update(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    h.update(&v.as_f64().to_le_bytes());
                }
            }
        });
        h.finalize()
    }
}

/// He-normal weights: std = sqrt(2 / fan_in).
pub fn he_normal<T: Scalar>(shape: [usize; 4], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geometry: ConvGeometry,
}

impl<T: Scalar> Conv2d<T> {
    pub fn he(
        cin: usize,
        cout: usize,
        k: usize,
        geometry: ConvGeometry,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self::from_weight(he_normal([cout, cin, k, k], cin * k * k, rng), bias, geometry)
    }

    pub fn from_weight(weight: Tensor<T>, bias: bool, geometry: ConvGeometry) -> Self {
        let cout = weight.shape()[0];
        Self {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Tensor::zeros([cout]))),
            geometry,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.as_mut().map(|b| b.bind(tape));
        Ok(tape.conv2d(x, w, b, self.geometry)?)
    }

    /// Keeps output filters `keep` (and their biases).
    pub fn select_outputs(&mut self, keep: &[usize]) -> Result<()> {
        self.weight.set(self.weight.value().select(0, keep)?);
        if let Some(b) = &mut self.bias {
            b.set(b.value().select(0, keep)?);
        }
        Ok(())
    }

    /// Keeps input channels `keep`.
    pub fn select_inputs(&mut self, keep: &[usize]) -> Result<()> {
        self.weight.set(self.weight.value().select(1, keep)?);
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "weight"), Slot::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), Slot::Param(b));
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), SlotMut::Param(b));
        }
    }
}

/// Transposed convolution; weight layout `[Cin, Cout, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    /// He-style init with the effective fan-in of a strided transposed conv.
    pub fn he(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        Self {
            weight: Param::new(he_normal([cin, cout, k, k], fan_in, rng)),
            bias: Param::new(Tensor::zeros([cout])),
            stride,
            pad,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        Ok(tape.conv2d_transpose(x, w, Some(b), self.stride, self.pad)?)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "weight"), Slot::Param(&self.weight));
        f(join(prefix, "bias"), Slot::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        f(join(prefix, "bias"), SlotMut::Param(&mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub stats: RunningStats<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full([channels], T::one())),
            beta: Param::new(Tensor::zeros([channels])),
            stats: RunningStats::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.stats.channels()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Var> {
        let g = self.gamma.bind(tape);
        let b = self.beta.bind(tape);
        Ok(tape.batch_norm(x, g, b, &mut self.stats, mode)?)
    }

    pub fn select(&mut self, keep: &[usize]) -> Result<()> {
        self.gamma.set(self.gamma.value().select(0, keep)?);
        self.beta.set(self.beta.value().select(0, keep)?);
        self.stats.mean = self.stats.mean.select(0, keep)?;
        self.stats.var = self.stats.var.select(0, keep)?;
        Ok(())
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "gamma"), Slot::Param(&self.gamma));
        f(join(prefix, "beta"), Slot::Param(&self.beta));
        f(join(prefix, "stats"), Slot::Stats(&self.stats));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>)) {
        f(join(prefix, "gamma"), SlotMut::Param(&mut self.gamma));
        f(join(prefix, "beta"), SlotMut::Param(&mut self.beta));
        f(join(prefix, "stats"), SlotMut::Stats(&mut self.stats));
    }
}

/// Bias-free convolution followed by batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn he(cin: usize, cout: usize, k: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::he(cin, cout, k, geometry, false, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        self.bn.forward(tape, y, mode)
    }

    pub fn select_outputs(&mut self, keep: &[usize]) -> Result<()> {
        self.conv.select_outputs(keep)?;
        self.bn.select(keep)
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
