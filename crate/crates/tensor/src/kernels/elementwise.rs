use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(y.shape().to_vec(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Stacks rank-4 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let first = xs.first().ok_or_else(|| TensorError::invalid(OP, "no inputs"))?;
    let (n, _, h, w) = first.dims4(OP)?;
    let mut total = 0;
    for x in xs {
        let (xn, xc, xh, xw) = x.dims4(OP)?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(TensorError::shape(
                OP,
                format!("{:?} vs {:?}", x.shape(), first.shape()),
            ));
        }
        total += xc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for s in 0..n {
        for x in xs {
            let per = x.shape()[1] * plane;
            out.extend_from_slice(&x.data()[s * per..(s + 1) * per]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total, h, w], out))
}

/// Channels `start..start + len` of a rank-4 tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    const OP: &str = "slice_channels";
    let (n, c, h, w) = x.dims4(OP)?;
    if len == 0 || start + len > c {
        return Err(TensorError::invalid(OP, format!("{start}..{} of {c}", start + len)));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for s in 0..n {
        let base = (s * c + start) * plane;
        out.extend_from_slice(&x.data()[base..base + len * plane]);
    }
    Ok(Tensor::from_parts(vec![n, len, h, w], out))
}

/// Scatters a channel-slice gradient back into a zeroed full-size gradient.
pub fn slice_channels_backward<T: Scalar>(
    input_shape: &[usize],
    start: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (n, c) = (input_shape[0], input_shape[1]);
    let plane = input_shape[2] * input_shape[3];
    let len = dy.shape()[1];
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for s in 0..n {
        let base = (s * c + start) * plane;
        dx.data_mut()[base..base + len * plane]
            .copy_from_slice(&dy.data()[s * len * plane..(s + 1) * len * plane]);
    }
    dx
}

/// Repeats every batch item `times` times consecutively.
pub fn repeat_batch<T: Scalar>(x: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
    if times == 0 {
        return Err(TensorError::invalid("repeat_batch", "times 0"));
    }
    let n = x.shape()[0];
    let per = x.len() / n;
    let mut out = Vec::with_capacity(x.len() * times);
    for s in 0..n {
        for _ in 0..times {
            out.extend_from_slice(&x.data()[s * per..(s + 1) * per]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[0] = n * times;
    Ok(Tensor::from_parts(shape, out))
}

pub fn repeat_batch_backward<T: Scalar>(
    input_shape: &[usize],
    times: usize,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let n = input_shape[0];
    let per = dy.len() / (n * times);
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for s in 0..n {
        let dst = &mut dx.data_mut()[s * per..(s + 1) * per];
        for r in 0..times {
            let src = &dy.data()[(s * times + r) * per..(s * times + r + 1) * per];
            for (d, &g) in dst.iter_mut().zip(src) {
                *d += g;
            }
        }
    }
    dx
}

/// Zero-pads the bottom and right edges of a rank-4 tensor.
pub fn pad_bottom_right<T: Scalar>(x: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("pad_bottom_right")?;
    let (oh, ow) = (h + ph, w + pw);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..h {
            dst[y * ow..y * ow + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

/// Keeps the top-left `h x w` window of every plane.
pub fn crop_top_left<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, xh, xw) = x.dims4("crop_top_left")?;
    if h == 0 || w == 0 || h > xh || w > xw {
        return Err(TensorError::invalid(
            "crop_top_left",
            format!("{h}x{w} from {xh}x{xw}"),
        ));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for src in x.data().chunks(xh * xw) {
        for y in 0..h {
            out.extend_from_slice(&src[y * xw..y * xw + w]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}
