use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Inference,
}

/// Per-channel running statistics owned by a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Weight of the previous running value in each update.
    pub momentum: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::full([channels], T::one()),
            momentum: 0.9,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Saved state for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: NormMode,
}

fn check<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<(usize, usize, usize)> {
    const OP: &str = "batch_norm";
    let (n, c, h, w) = x.dims4(OP)?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.channels() != c {
        return Err(TensorError::shape(
            OP,
            format!(
                "{c} channels, gamma {:?}, beta {:?}, stats {}",
                gamma.shape(),
                beta.shape(),
                stats.channels()
            ),
        ));
    }
    Ok((n, c, h * w))
}

pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, plane) = check(x, gamma, beta, stats)?;
    let count = T::lit((n * plane) as f64);
    let eps = T::lit(BN_EPS);
    let data = x.data();
    let (mean, var): (Vec<T>, Vec<T>) = match mode {
        NormMode::Train => (0..c)
            .map(|ch| {
                let mut sum = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    sum += data[base..base + plane].iter().copied().sum::<T>();
                }
                let mean = sum / count;
                let mut sq = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    for &v in &data[base..base + plane] {
                        sq += (v - mean) * (v - mean);
                    }
                }
                (mean, sq / count)
            })
            .unzip(),
        NormMode::Inference => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
    };
    if mode == NormMode::Train {
        let m = T::lit(stats.momentum);
        let one_m = T::one() - m;
        for ch in 0..c {
            let rm = &mut stats.mean.data_mut()[ch];
            *rm = m * *rm + one_m * mean[ch];
            let rv = &mut stats.var.data_mut()[ch];
            *rv = m * *rv + one_m * var[ch];
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut y = vec![T::zero(); data.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let (g, b, mu, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
            for i in base..base + plane {
                let xh = (data[i] - mu) * is;
                xhat[i] = xh;
                y[i] = g * xh + b;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), y),
        BatchNormCache {
            xhat: Tensor::from_parts(shape, xhat),
            inv_std,
            mode,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = dy.dims4("batch_norm_backward").expect("rank 4");
    let plane = h * w;
    let count = T::lit((n * plane) as f64);
    let xhat = cache.xhat.data();
    let g = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            for i in base..base + plane {
                dgamma[ch] += g[i] * xhat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * plane;
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            match cache.mode {
                NormMode::Train => {
                    let (sum_g, sum_gx) = (dbeta[ch], dgamma[ch]);
                    for i in base..base + plane {
                        dx[i] = scale * (g[i] - (sum_g + xhat[i] * sum_gx) / count);
                    }
                }
                NormMode::Inference => {
                    for i in base..base + plane {
                        dx[i] = scale * g[i];
                    }
                }
            }
        }
    }
    (
        Tensor::from_parts(dy.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}
