use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Broadcast a `1 x 1` map over the target extent.
    Tile,
    /// Bilinear interpolation with half-pixel centers (align-corners false).
    Bilinear,
}

/// Interpolation taps for one output coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: f64,
}

/// Half-pixel-center source taps for resizing `src` samples to `dst`.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { s - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

pub fn upsample<T: Scalar>(
    x: &Tensor<T>,
    target_h: usize,
    target_w: usize,
    mode: UpsampleMode,
) -> Result<Tensor<T>> {
    const OP: &str = "upsample";
    let (n, c, h, w) = x.dims4(OP)?;
    if target_h < h || target_w < w {
        return Err(TensorError::invalid(
            OP,
            format!("cannot downscale {h}x{w} to {target_h}x{target_w}"),
        ));
    }
    let out_plane = target_h * target_w;
    let mut out = vec![T::zero(); n * c * out_plane];
    match mode {
        UpsampleMode::Tile => {
            if h != 1 || w != 1 {
                return Err(TensorError::invalid(OP, format!("tile needs a 1x1 map, got {h}x{w}")));
            }
            for (plane, &v) in out.chunks_mut(out_plane).zip(x.data()) {
                plane.fill(v);
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, target_h);
            let tx = bilinear_taps(w, target_w);
            for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(out_plane)) {
                for (oy, ry) in ty.iter().enumerate() {
                    let fy = T::lit(ry.frac);
                    let (r0, r1) = (&src[ry.lo * w..(ry.lo + 1) * w], &src[ry.hi * w..(ry.hi + 1) * w]);
                    for (ox, cx) in tx.iter().enumerate() {
                        let fx = T::lit(cx.frac);
                        let top = r0[cx.lo] + (r0[cx.hi] - r0[cx.lo]) * fx;
                        let bot = r1[cx.lo] + (r1[cx.hi] - r1[cx.lo]) * fx;
                        dst[oy * target_w + ox] = top + (bot - top) * fy;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, target_h, target_w], out))
}

pub fn upsample_backward<T: Scalar>(
    input_shape: &[usize],
    mode: UpsampleMode,
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (th, tw) = (dy.shape()[2], dy.shape()[3]);
    let out_plane = th * tw;
    let mut dx = Tensor::zeros(input_shape.to_vec());
    match mode {
        UpsampleMode::Tile => {
            for (g, plane) in dx.data_mut().iter_mut().zip(dy.data().chunks(out_plane)) {
                *g = plane.iter().copied().sum();
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, th);
            let tx = bilinear_taps(w, tw);
            for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(out_plane)) {
                for (oy, ry) in ty.iter().enumerate() {
                    let fy = T::lit(ry.frac);
                    for (ox, cx) in tx.iter().enumerate() {
                        let fx = T::lit(cx.frac);
                        let g = src[oy * tw + ox];
                        let top = g * (T::one() - fy);
                        let bot = g * fy;
                        dst[ry.lo * w + cx.lo] += top * (T::one() - fx);
                        dst[ry.lo * w + cx.hi] += top * fx;
                        dst[ry.hi * w + cx.lo] += bot * (T::one() - fx);
                        dst[ry.hi * w + cx.hi] += bot * fx;
                    }
                }
            }
        }
    }
    dx
}
