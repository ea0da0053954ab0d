use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max pooling result; `argmax` holds the flat input index feeding each output.
pub struct MaxPoolOut<T> {
    pub y: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Square max pooling; padded cells never win.
pub fn max_pool2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<MaxPoolOut<T>> {
    const OP: &str = "max_pool2d";
    let (n, c, h, w) = x.dims4(OP)?;
    if kernel == 0 || stride == 0 || pad >= kernel {
        return Err(TensorError::invalid(OP, format!("k {kernel} s {stride} p {pad}")));
    }
    if h + 2 * pad < kernel || w + 2 * pad < kernel {
        return Err(TensorError::EmptyOutput {
            op: OP,
            detail: format!("{h}x{w}"),
        });
    }
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if data[idx] > best || best_idx == usize::MAX {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                y.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(MaxPoolOut {
        y: Tensor::from_parts(vec![n, c, oh, ow], y),
        argmax,
    })
}

pub fn max_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx] += g;
    }
    dx
}

/// Mean of each `H x W` plane, shape `[N, C, 1, 1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![n, c, 1, 1], data))
}

/// Each input pixel receives `upstream / (H * W)`.
pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::lit(plane as f64);
    let mut data = Vec::with_capacity(dy.len() * plane);
    for &g in dy.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_parts(input_shape.to_vec(), data)
}
