use crate::error::{BgError, Result};
use crate::frame::{Frame, Mask};

#[derive(Debug, Clone)]
pub struct CompositeSpec {
    pub background: Frame,
    /// Box-blur radius applied to the mask, in pixels.
    pub feather: usize,
}

/// Mask blurred with a `(2r + 1)^2` box; the window is clipped at the borders
/// and averages only in-bounds pixels.
pub fn feathered_alpha(mask: &Mask, radius: usize) -> Vec<f64> {
    let (h, w) = mask.dims();
    // Summed-area table with a zero row and column.
    let mut sat = vec![0u64; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = mask.at(y, x) as u64 + sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x];
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let s = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0];
            out.push(s as f64 / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    out
}

/// `alpha * frame + (1 - alpha) * background`, rounded per channel.
pub fn composite(frame: &Frame, mask: &Mask, spec: &CompositeSpec) -> Result<Frame> {
    if frame.dims() != mask.dims() {
        return Err(BgError::Data(format!(
            "frame {:?} and mask {:?} differ in size",
            frame.dims(),
            mask.dims()
        )));
    }
    let bg = spec.background.resize(frame.width, frame.height);
    let alpha = feathered_alpha(mask, spec.feather);
    let data = frame
        .data
        .iter()
        .zip(&bg.data)
        .enumerate()
        .map(|(i, (&f, &b))| {
            let a = alpha[i / 3];
            (a * f as f64 + (1.0 - a) * b as f64).round() as u8
        })
        .collect();
    Ok(Frame {
        width: frame.width,
        height: frame.height,
        data,
    })
}
