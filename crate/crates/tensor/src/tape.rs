//! Reverse-mode automatic differentiation over a linear record of ops.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so replaying them backwards visits every consumer before
//! its producers.

use crate::error::{Result, TensorError};
use crate::kernels::conv::{self, ConvGeometry};
use crate::kernels::elementwise;
use crate::kernels::loss::{self, Labels};
use crate::kernels::norm::{self, BatchNormCache, NormMode, RunningStats};
use crate::kernels::pool;
use crate::kernels::resample::{self, UpsampleMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: ConvGeometry,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    RepeatBatch {
        x: Var,
        times: usize,
    },
    Reshape(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BatchNormCache<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Upsample {
        x: Var,
        mode: UpsampleMode,
    },
    Softmax(Var),
    /// Losses keep their gradient with respect to the input, scaled later by
    /// the upstream scalar.
    Loss {
        x: Var,
        grad: Tensor<T>,
    },
    Scale {
        x: Var,
        factor: T,
    },
    DotConst {
        x: Var,
        weights: Tensor<T>,
    },
    Pad(Var),
    Crop(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a differentiable computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, g: ConvGeometry) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), g)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", y, Op::Conv2d { x, w, b, g }, &inputs)
    }

    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = conv::conv2d_transpose(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d_transpose",
            y,
            Op::ConvTranspose {
                x,
                w,
                b,
                stride,
                pad,
            },
            &inputs,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = elementwise::relu(self.value(x));
        self.push("relu", y, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = elementwise::add(self.value(a), self.value(b))?;
        self.push("add", y, Op::Add(a, b), &[a, b])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = elementwise::concat_channels(&values)?;
        self.push("concat_channels", y, Op::Concat(xs.to_vec()), xs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = elementwise::slice_channels(self.value(x), start, len)?;
        self.push("slice_channels", y, Op::SliceChannels { x, start }, &[x])
    }

    pub fn repeat_batch(&mut self, x: Var, times: usize) -> Result<Var> {
        let y = elementwise::repeat_batch(self.value(x), times)?;
        self.push("repeat_batch", y, Op::RepeatBatch { x, times }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push("reshape", y, Op::Reshape(x), &[x])
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let (y, cache) = norm::batch_norm(self.value(x), self.value(gamma), self.value(beta), stats, mode)?;
        self.push(
            "batch_norm",
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            &[x, gamma, beta],
        )
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let out = pool::max_pool2d(self.value(x), kernel, stride, pad)?;
        self.push(
            "max_pool2d",
            out.y,
            Op::MaxPool {
                x,
                argmax: out.argmax,
            },
            &[x],
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = pool::global_avg_pool(self.value(x))?;
        self.push("global_avg_pool", y, Op::GlobalAvgPool(x), &[x])
    }

    pub fn upsample(&mut self, x: Var, h: usize, w: usize, mode: UpsampleMode) -> Result<Var> {
        let y = resample::upsample(self.value(x), h, w, mode)?;
        self.push("upsample", y, Op::Upsample { x, mode }, &[x])
    }

    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let y = loss::softmax_channel(self.value(x))?;
        self.push("softmax_channel", y, Op::Softmax(x), &[x])
    }

    /// Scalar mean cross-entropy of `softmax(scores)` against `labels`.
    pub fn softmax_ce_loss(&mut self, scores: Var, labels: &Labels, ignore_label: u8) -> Result<Var> {
        let (l, grad) = loss::softmax_ce_loss(self.value(scores), labels, ignore_label)?;
        self.push(
            "softmax_ce_loss",
            Tensor::scalar(l),
            Op::Loss { x: scores, grad },
            &[scores],
        )
    }

    /// Scalar mean squared difference to a constant target.
    pub fn l2_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let (l, grad) = loss::l2_loss(self.value(pred), target)?;
        self.push("l2_loss", Tensor::scalar(l), Op::Loss { x: pred, grad }, &[pred])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let y = self.value(x).map(|v| v * factor);
        self.push("scale", y, Op::Scale { x, factor }, &[x])
    }

    /// Scalar `sum(x * weights)` for a constant `weights` of the same shape.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(TensorError::shape(
                "dot_const",
                format!("{:?} vs {:?}", xv.shape(), weights.shape()),
            ));
        }
        let s: T = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(
            "dot_const",
            Tensor::scalar(s),
            Op::DotConst {
                x,
                weights: weights.clone(),
            },
            &[x],
        )
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = Tensor::full(self.value(x).shape().to_vec(), T::one());
        self.dot_const(x, &ones)
    }

    pub fn pad_bottom_right(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let y = elementwise::pad_bottom_right(self.value(x), ph, pw)?;
        self.push("pad", y, Op::Pad(x), &[x])
    }

    pub fn crop_top_left(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = elementwise::crop_top_left(self.value(x), h, w)?;
        self.push("crop", y, Op::Crop(x), &[x])
    }

    /// Propagates `d loss / d node` from a scalar `loss` back to every node that
    /// requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Tensor<T>| accumulate(grads, v, g);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, g } => {
                let r = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    b.is_some_and(needs),
                    *g,
                    dy,
                    needs(*x),
                    needs(*w),
                )?;
                if let Some(dx) = r.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = r.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose { x, w, b, stride, pad } => {
                let r = conv::conv2d_transpose_backward(
                    self.value(*x),
                    self.value(*w),
                    b.is_some_and(needs),
                    *stride,
                    *pad,
                    dy,
                    needs(*x),
                    needs(*w),
                )?;
                if let Some(dx) = r.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = r.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    acc(*b, db);
                }
            }
            Op::Relu(x) => acc(*x, elementwise::relu_backward(&node.value, dy)),
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, dy.clone());
                }
                if needs(*b) {
                    acc(*b, dy.clone());
                }
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    if needs(x) {
                        acc(x, elementwise::slice_channels(dy, start, c)?);
                    }
                    start += c;
                }
            }
            Op::SliceChannels { x, start } => acc(
                *x,
                elementwise::slice_channels_backward(self.value(*x).shape(), *start, dy),
            ),
            Op::RepeatBatch { x, times } => acc(
                *x,
                elementwise::repeat_batch_backward(self.value(*x).shape(), *times, dy),
            ),
            Op::Reshape(x) => acc(*x, dy.reshape(self.value(*x).shape())?),
            Op::BatchNorm { x, gamma, beta, cache } => {
                let (dx, dg, db) = norm::batch_norm_backward(cache, self.value(*gamma), dy);
                if needs(*x) {
                    acc(*x, dx);
                }
                if needs(*gamma) {
                    acc(*gamma, dg);
                }
                if needs(*beta) {
                    acc(*beta, db);
                }
            }
            Op::MaxPool { x, argmax } => acc(
                *x,
                pool::max_pool2d_backward(self.value(*x).shape(), argmax, dy),
            ),
            Op::GlobalAvgPool(x) => acc(*x, pool::global_avg_pool_backward(self.value(*x).shape(), dy)),
            Op::Upsample { x, mode } => acc(
                *x,
                resample::upsample_backward(self.value(*x).shape(), *mode, dy),
            ),
            Op::Softmax(x) => acc(*x, loss::softmax_channel_backward(&node.value, dy)),
            Op::Loss { x, grad } => {
                let up = dy.data()[0];
                acc(*x, grad.map(|g| g * up));
            }
            Op::Scale { x, factor } => acc(*x, dy.map(|g| g * *factor)),
            Op::DotConst { x, weights } => {
                let up = dy.data()[0];
                acc(*x, weights.map(|w| w * up));
            }
            Op::Pad(x) => {
                let s = self.value(*x).shape();
                acc(*x, elementwise::crop_top_left(dy, s[2], s[3])?);
            }
            Op::Crop(x) => {
                let s = self.value(*x).shape();
                let (h, w) = (dy.shape()[2], dy.shape()[3]);
                acc(*x, elementwise::pad_bottom_right(dy, s[2] - h, s[3] - w)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`]: gradients of leaves that require them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
