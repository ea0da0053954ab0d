//! Convolution and transposed convolution via im2col + GEMM.
//!
//! Convolution is cross-correlation (no kernel flip). Weights are laid out
//! `[Cout, Cin, kh, kw]` for `conv2d` and `[Cin, Cout, kh, kw]` for
//! `conv2d_transpose`, so a transposed convolution with weight `w` is exactly
//! the input-gradient operator of `conv2d` with the same `w`.

use crate::error::{Result, TensorError};
use crate::parallel::{for_each_chunk, map_indices};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            stride,
            pad,
            dilation,
        }
    }

    /// Output extent of a convolution over `input` with a `kernel`-wide window.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(TensorError::invalid(
                op,
                format!("stride {} dilation {}", self.stride, self.dilation),
            ));
        }
        Ok(())
    }
}

/// Spatial description of one im2col unfolding.
#[derive(Clone, Copy)]
struct Patch {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    g: ConvGeometry,
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_identity(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.g.stride == 1
            && self.g.pad == 0
            && self.oh == self.h
            && self.ow == self.w
    }

    /// Valid output columns `[lo, hi)` for kernel column offset `j`.
    fn col_range(&self, j: usize) -> (usize, usize) {
        let off = j * self.g.dilation;
        valid_range(off, self.g.pad, self.g.stride, self.w, self.ow)
    }

    fn row_range(&self, i: usize) -> (usize, usize) {
        let off = i * self.g.dilation;
        valid_range(off, self.g.pad, self.g.stride, self.h, self.oh)
    }
}

/// Outputs `o` in `[lo, hi)` satisfy `0 <= o * stride + off - pad < extent`.
fn valid_range(off: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    let limit = extent + pad;
    let hi = if limit > off {
        ((limit - off - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], p: &Patch, col: &mut [T]) {
    let cols = p.cols();
    let s = p.g.stride;
    for c in 0..p.channels {
        let plane = &x[c * p.h * p.w..(c + 1) * p.h * p.w];
        for i in 0..p.kh {
            let (ylo, yhi) = p.row_range(i);
            for j in 0..p.kw {
                let row = (c * p.kh + i) * p.kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (xlo, xhi) = p.col_range(j);
                for oy in 0..p.oh {
                    let line = &mut dst[oy * p.ow..(oy + 1) * p.ow];
                    if oy < ylo || oy >= yhi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * s + i * p.g.dilation - p.g.pad;
                    let src = &plane[iy * p.w..(iy + 1) * p.w];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    let base = j * p.g.dilation;
                    for (ox, v) in line.iter_mut().enumerate().take(xhi).skip(xlo) {
                        *v = src[ox * s + base - p.g.pad];
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into a zeroed image (adjoint of [`im2col`]).
fn col2im<T: Scalar>(col: &[T], p: &Patch, x: &mut [T]) {
    let cols = p.cols();
    let s = p.g.stride;
    x.fill(T::zero());
    for c in 0..p.channels {
        let plane = &mut x[c * p.h * p.w..(c + 1) * p.h * p.w];
        for i in 0..p.kh {
            let (ylo, yhi) = p.row_range(i);
            for j in 0..p.kw {
                let row = (c * p.kh + i) * p.kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                let (xlo, xhi) = p.col_range(j);
                let base = j * p.g.dilation;
                for oy in ylo..yhi {
                    let iy = oy * s + i * p.g.dilation - p.g.pad;
                    let dst = &mut plane[iy * p.w..(iy + 1) * p.w];
                    let line = &src[oy * p.ow..(oy + 1) * p.ow];
                    for ox in xlo..xhi {
                        dst[ox * s + base - p.g.pad] += line[ox];
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, b: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(TensorError::shape(op, format!("bias {:?} for {cout} outputs", b.shape())));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(y: &mut [T], b: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = b {
        for (c, &bv) in b.data().iter().enumerate() {
            for v in &mut y[c * plane..(c + 1) * plane] {
                *v += bv;
            }
        }
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dy.dims4("bias_grad").expect("rank 4");
    let plane = h * w;
    let mut db = vec![T::zero(); c];
    for s in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let base = (s * c + ch) * plane;
            *acc += dy.data()[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_parts(vec![c], db)
}

/// Sums per-sample partials in sample order.
fn reduce_partials<T: Scalar>(parts: Vec<Vec<T>>, shape: Vec<usize>) -> Tensor<T> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().expect("at least one sample");
    for p in iter {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    Tensor::from_parts(shape, acc)
}

struct ConvPlan {
    n: usize,
    cin: usize,
    cout: usize,
    patch: Patch,
}

fn plan_conv<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeometry) -> Result<ConvPlan> {
    const OP: &str = "conv2d";
    g.validate(OP)?;
    let (n, cin, h, wd) = x.dims4(OP)?;
    let (cout, wcin, kh, kw) = w.dims4(OP)?;
    if wcin != cin {
        return Err(TensorError::shape(
            OP,
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    let (oh, ow) = match (g.out_extent(h, kh), g.out_extent(wd, kw)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(TensorError::EmptyOutput {
                op: OP,
                detail: format!("{h}x{wd} input, {kh}x{kw} kernel, {g:?}"),
            })
        }
    };
    Ok(ConvPlan {
        n,
        cin,
        cout,
        patch: Patch {
            channels: cin,
            h,
            w: wd,
            kh,
            kw,
            oh,
            ow,
            g,
        },
    })
}

/// 2-D cross-correlation, `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let plan = plan_conv(x, w, g)?;
    check_bias("conv2d", b, plan.cout)?;
    let p = plan.patch;
    let (k, cols) = (p.rows(), p.cols());
    let in_per = plan.cin * p.h * p.w;
    let out_per = plan.cout * cols;
    let mut out = vec![T::zero(); plan.n * out_per];
    for_each_chunk(&mut out, out_per, |s, y| {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let wm = MatRef::new(w.data(), plan.cout, k);
        if p.is_identity() {
            gemm(wm, MatRef::new(xs, k, cols), T::zero(), y);
        } else {
            T::with_scratch(k * cols, |col| {
                im2col(xs, &p, col);
                gemm(wm, MatRef::new(col, k, cols), T::zero(), y);
            });
        }
        add_bias(y, b, cols);
    });
    Ok(Tensor::from_parts(vec![plan.n, plan.cout, p.oh, p.ow], out))
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Gradients of [`conv2d`] given the upstream gradient `dy`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    g: ConvGeometry,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let plan = plan_conv(x, w, g)?;
    let p = plan.patch;
    let (k, cols) = (p.rows(), p.cols());
    if dy.shape() != [plan.n, plan.cout, p.oh, p.ow] {
        return Err(TensorError::shape("conv2d_backward", format!("dy {:?}", dy.shape())));
    }
    let in_per = plan.cin * p.h * p.w;
    let out_per = plan.cout * cols;

    let dw = need_dw.then(|| {
        let parts = map_indices(plan.n, |s| {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            let dys = &dy.data()[s * out_per..(s + 1) * out_per];
            let mut part = vec![T::zero(); plan.cout * k];
            if p.is_identity() {
                gemm(
                    MatRef::new(dys, plan.cout, cols),
                    MatRef::t(xs, k, cols),
                    T::zero(),
                    &mut part,
                );
            } else {
                T::with_scratch(k * cols, |col| {
                    im2col(xs, &p, col);
                    gemm(
                        MatRef::new(dys, plan.cout, cols),
                        MatRef::t(col, k, cols),
                        T::zero(),
                        &mut part,
                    );
                });
            }
            part
        });
        reduce_partials(parts, w.shape().to_vec())
    });

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); plan.n * in_per];
        for_each_chunk(&mut dx, in_per, |s, dxs| {
            let dys = &dy.data()[s * out_per..(s + 1) * out_per];
            let wt = MatRef::t(w.data(), plan.cout, k);
            if p.is_identity() {
                gemm(wt, MatRef::new(dys, plan.cout, cols), T::zero(), dxs);
            } else {
                T::with_scratch(k * cols, |col| {
                    gemm(wt, MatRef::new(dys, plan.cout, cols), T::zero(), col);
                    col2im(col, &p, dxs);
                });
            }
        });
        Tensor::from_parts(x.shape().to_vec(), dx)
    });

    let db = has_bias.then(|| bias_grad(dy));
    Ok(ConvGrads { dx, dw, db })
}

struct TransposePlan {
    n: usize,
    cin: usize,
    cout: usize,
    /// Unfolding of the (larger) output image back onto the input grid.
    patch: Patch,
}

fn plan_transpose<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<TransposePlan> {
    const OP: &str = "conv2d_transpose";
    if stride == 0 {
        return Err(TensorError::invalid(OP, "stride 0"));
    }
    let (n, cin, h, wd) = x.dims4(OP)?;
    let (wcin, cout, kh, kw) = w.dims4(OP)?;
    if wcin != cin {
        return Err(TensorError::shape(
            OP,
            format!("input has {cin} channels, weight expects {wcin}"),
        ));
    }
    let oh = (h as isize - 1) * stride as isize - 2 * pad as isize + kh as isize;
    let ow = (wd as isize - 1) * stride as isize - 2 * pad as isize + kw as isize;
    if oh <= 0 || ow <= 0 {
        return Err(TensorError::EmptyOutput {
            op: OP,
            detail: format!("computed output {oh}x{ow}"),
        });
    }
    let (oh, ow) = (oh as usize, ow as usize);
    let g = ConvGeometry::new(stride, pad, 1);
    // The forward convolution of the output grid must land exactly on the input grid.
    if g.out_extent(oh, kh) != Some(h) || g.out_extent(ow, kw) != Some(wd) {
        return Err(TensorError::invalid(OP, "inconsistent geometry"));
    }
    Ok(TransposePlan {
        n,
        cin,
        cout,
        patch: Patch {
            channels: cout,
            h: oh,
            w: ow,
            kh,
            kw,
            oh: h,
            ow: wd,
            g,
        },
    })
}

/// Transposed convolution, `x: [N, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`;
/// output extent `(H - 1) * stride - 2 * pad + kh`.
pub fn conv2d_transpose<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let plan = plan_transpose(x, w, stride, pad)?;
    check_bias("conv2d_transpose", b, plan.cout)?;
    let p = plan.patch;
    let (k, cols) = (p.rows(), p.cols());
    let in_per = plan.cin * cols;
    let out_plane = p.h * p.w;
    let out_per = plan.cout * out_plane;
    let mut out = vec![T::zero(); plan.n * out_per];
    for_each_chunk(&mut out, out_per, |s, y| {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        T::with_scratch(k * cols, |col| {
            gemm(
                MatRef::t(w.data(), plan.cin, k),
                MatRef::new(xs, plan.cin, cols),
                T::zero(),
                col,
            );
            col2im(col, &p, y);
        });
        add_bias(y, b, out_plane);
    });
    Ok(Tensor::from_parts(vec![plan.n, plan.cout, p.h, p.w], out))
}

/// Gradients of [`conv2d_transpose`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let plan = plan_transpose(x, w, stride, pad)?;
    let p = plan.patch;
    let (k, cols) = (p.rows(), p.cols());
    if dy.shape() != [plan.n, plan.cout, p.h, p.w] {
        return Err(TensorError::shape(
            "conv2d_transpose_backward",
            format!("dy {:?}", dy.shape()),
        ));
    }
    let in_per = plan.cin * cols;
    let out_per = plan.cout * p.h * p.w;
    let unfold = |s: usize, f: &mut dyn FnMut(&[T])| {
        let dys = &dy.data()[s * out_per..(s + 1) * out_per];
        T::with_scratch(k * cols, |col| {
            im2col(dys, &p, col);
            f(col)
        })
    };

    let dw = need_dw.then(|| {
        let parts = map_indices(plan.n, |s| {
            let xs = &x.data()[s * in_per..(s + 1) * in_per];
            let mut part = vec![T::zero(); plan.cin * k];
            unfold(s, &mut |col| {
                gemm(
                    MatRef::new(xs, plan.cin, cols),
                    MatRef::t(col, k, cols),
                    T::zero(),
                    &mut part,
                )
            });
            part
        });
        reduce_partials(parts, w.shape().to_vec())
    });

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); plan.n * in_per];
        for_each_chunk(&mut dx, in_per, |s, dxs| {
            unfold(s, &mut |col| {
                gemm(
                    MatRef::new(w.data(), plan.cin, k),
                    MatRef::new(col, k, cols),
                    T::zero(),
                    dxs,
                )
            });
        });
        Tensor::from_parts(x.shape().to_vec(), dx)
    });

    let db = has_bias.then(|| bias_grad(dy));
    Ok(ConvGrads { dx, dw, db })
}
