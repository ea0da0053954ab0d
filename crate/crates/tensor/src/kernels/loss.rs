use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax over the channel axis of `[N, C, H, W]`, stabilized by subtracting
/// the per-pixel maximum.
pub fn softmax_channel<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("softmax_channel")?;
    let plane = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        let base = s * c * plane;
        for p in 0..plane {
            let at = |ch: usize| base + ch * plane + p;
            let max = (0..c).map(|ch| src[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (src[at(ch)] - max).exp();
                out[at(ch)] = e;
                sum += e;
            }
            for ch in 0..c {
                out[at(ch)] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Backward of [`softmax_channel`] given its output `y`.
pub fn softmax_channel_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = y.dims4("softmax_channel_backward").expect("rank 4");
    let plane = h * w;
    let (yv, gv) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yv.len()];
    for s in 0..n {
        let base = s * c * plane;
        for p in 0..plane {
            let dot: T = (0..c)
                .map(|ch| yv[base + ch * plane + p] * gv[base + ch * plane + p])
                .sum();
            for ch in 0..c {
                let i = base + ch * plane + p;
                dx[i] = yv[i] * (gv[i] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

/// Per-pixel class labels, `[N, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::shape("labels", format!("{shape:?} vs {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// One-hot `[N, classes, H, W]` encoding; ignored pixels are all zero.
    pub fn one_hot<T: Scalar>(&self, classes: usize) -> Tensor<T> {
        let [n, h, w] = self.shape;
        let plane = h * w;
        let mut out = vec![T::zero(); n * classes * plane];
        for s in 0..n {
            for p in 0..plane {
                let l = self.data[s * plane + p] as usize;
                if l < classes {
                    out[(s * classes + l) * plane + p] = T::one();
                }
            }
        }
        Tensor::from_parts(vec![n, classes, h, w], out)
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(scores)` over the
/// non-ignored pixels. Returns `(loss, dloss/dscores)`.
pub fn softmax_ce_loss<T: Scalar>(
    scores: &Tensor<T>,
    labels: &Labels,
    ignore_label: u8,
) -> Result<(T, Tensor<T>)> {
    const OP: &str = "softmax_ce_loss";
    let (n, c, h, w) = scores.dims4(OP)?;
    if labels.shape != [n, h, w] {
        return Err(TensorError::shape(
            OP,
            format!("scores {:?}, labels {:?}", scores.shape(), labels.shape),
        ));
    }
    let plane = h * w;
    let prob = softmax_channel(scores)?;
    let mut count = 0usize;
    for &l in &labels.data {
        if l == ignore_label {
            continue;
        }
        if l as usize >= c {
            return Err(TensorError::invalid(OP, format!("label {l} with {c} classes")));
        }
        count += 1;
    }
    if count == 0 {
        return Err(TensorError::invalid(OP, "every pixel is ignored"));
    }
    let inv = T::one() / T::lit(count as f64);
    let pv = prob.data();
    let sv = scores.data();
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); pv.len()];
    for s in 0..n {
        for p in 0..plane {
            let l = labels.data[s * plane + p];
            if l == ignore_label {
                continue;
            }
            let at = |ch: usize| (s * c + ch) * plane + p;
            // log-sum-exp form keeps saturated logits finite.
            let max = (0..c).map(|ch| sv[at(ch)]).fold(T::neg_infinity(), T::max);
            let lse = max + (0..c).map(|ch| (sv[at(ch)] - max).exp()).sum::<T>().ln();
            loss += lse - sv[at(l as usize)];
            for ch in 0..c {
                let target = if ch == l as usize { T::one() } else { T::zero() };
                grad[at(ch)] = (pv[at(ch)] - target) * inv;
            }
        }
    }
    Ok((loss * inv, Tensor::from_parts(scores.shape().to_vec(), grad)))
}

/// Mean squared difference. Returns `(loss, dloss/dpred)`.
pub fn l2_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(TensorError::shape(
            "l2_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let inv = T::one() / T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let mut loss = T::zero();
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            two * d * inv
        })
        .collect();
    Ok((loss * inv, Tensor::from_parts(pred.shape().to_vec(), grad)))
}
