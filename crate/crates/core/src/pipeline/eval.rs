use serde::{Deserialize, Serialize};

use crate::error::{BgError, Result};
use crate::frame::Mask;
use crate::pipeline::segment::Counters;

/// Default trimap half-widths for band-IoU curves.
pub const DEFAULT_BAND_WIDTHS: [usize; 5] = [1, 3, 5, 10, 20];

/// Intersection and union pixel counts per class (0 background, 1 foreground).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: [u64; 2],
    pub union: [u64; 2],
    pub pixels: u64,
}

impl IouCounts {
    pub fn merge(&mut self, other: &IouCounts) {
        for c in 0..2 {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        self.pixels += other.pixels;
    }

    /// An empty union scores 1 (class absent from both).
    pub fn iou(&self) -> Iou {
        let class = |c: usize| {
            if self.union[c] == 0 {
                1.0
            } else {
                self.intersection[c] as f64 / self.union[c] as f64
            }
        };
        let (background, foreground) = (class(0), class(1));
        Iou {
            background,
            foreground,
            mean: (background + foreground) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Iou {
    pub background: f64,
    pub foreground: f64,
    pub mean: f64,
}

fn check_pair(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(BgError::Data(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(())
}

/// Counts over the pixels where `region` is true (all pixels if `None`).
pub fn iou_counts(pred: &Mask, gt: &Mask, region: Option<&[bool]>) -> Result<IouCounts> {
    check_pair(pred, gt)?;
    let mut k = IouCounts::default();
    for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
        if region.is_some_and(|r| !r[i]) {
            continue;
        }
        k.pixels += 1;
        for c in 0..2u8 {
            let (pc, gc) = (p == c, g == c);
            k.intersection[c as usize] += u64::from(pc && gc);
            k.union[c as usize] += u64::from(pc || gc);
        }
    }
    Ok(k)
}

fn check_lists(pred: &[Mask], gt: &[Mask]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(BgError::Data(format!("{} predictions for {} ground-truth masks", pred.len(), gt.len())));
    }
    Ok(())
}

/// Per-class IoU aggregated over every pixel of every frame.
pub fn mean_iou(pred: &[Mask], gt: &[Mask]) -> Result<Iou> {
    Ok(mean_iou_counts(pred, gt)?.iou())
}

pub fn mean_iou_counts(pred: &[Mask], gt: &[Mask]) -> Result<IouCounts> {
    check_lists(pred, gt)?;
    let mut total = IouCounts::default();
    for (p, g) in pred.iter().zip(gt) {
        total.merge(&iou_counts(p, g, None)?);
    }
    Ok(total)
}

/// Pixels with a 4-neighbour of the other label.
pub fn boundary(gt: &Mask) -> Vec<bool> {
    let (h, w) = gt.dims();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = gt.at(y, x);
            out[y * w + x] = (y > 0 && gt.at(y - 1, x) != v)
                || (y + 1 < h && gt.at(y + 1, x) != v)
                || (x > 0 && gt.at(y, x - 1) != v)
                || (x + 1 < w && gt.at(y, x + 1) != v);
        }
    }
    out
}

/// Pixels within Chebyshev distance `width` of a boundary pixel.
pub fn band(gt: &Mask, width: usize) -> Vec<bool> {
    let (h, w) = gt.dims();
    let edge = boundary(gt);
    // Separable square dilation: rows, then columns.
    let mut rows = vec![false; h * w];
    for y in 0..h {
        let mut last: Option<usize> = None;
        let mut next = vec![None; w];
        for x in (0..w).rev() {
            if edge[y * w + x] {
                last = Some(x);
            }
            next[x] = last;
        }
        let mut prev: Option<usize> = None;
        for x in 0..w {
            if edge[y * w + x] {
                prev = Some(x);
            }
            rows[y * w + x] = prev.is_some_and(|p| x - p <= width) || next[x].is_some_and(|n| n - x <= width);
        }
    }
    let mut out = vec![false; h * w];
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(width);
            let hi = (y + width).min(h - 1);
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Mean IoU restricted to the trimap band of half-width `width` around the
/// ground-truth boundary, aggregated over all frames.
pub fn band_iou(pred: &[Mask], gt: &[Mask], width: usize) -> Result<Iou> {
    Ok(band_iou_counts(pred, gt, width)?.iou())
}

pub fn band_iou_counts(pred: &[Mask], gt: &[Mask], width: usize) -> Result<IouCounts> {
    if width == 0 {
        return Err(BgError::Config("trimap width must be at least 1".into()));
    }
    check_lists(pred, gt)?;
    let mut total = IouCounts::default();
    for (p, g) in pred.iter().zip(gt) {
        let region = band(g, width);
        total.merge(&iou_counts(p, g, Some(&region))?);
    }
    if total.pixels == 0 {
        return Err(BgError::Data("trimap band is empty (no ground-truth boundary)".into()));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
}

impl LatencyStats {
    /// `None` for an empty sample.
    pub fn from_ms(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = ((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len());
        Some(Self {
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p95_ms: s[rank - 1],
            samples: s.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub id: String,
    pub iou: Iou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: Vec<ClipScore>,
    pub mean: Iou,
    /// `(width, mean IoU)` pairs.
    pub band_curve: Vec<(usize, f64)>,
    pub counters: Counters,
    pub attenuation_latency: Option<LatencyStats>,
    pub refinement_latency: Option<LatencyStats>,
}

/// Scores per clip plus the joint mean and band curve over all clips.
pub fn evaluate(clips: &[(String, Vec<Mask>, Vec<Mask>)], widths: &[usize]) -> Result<EvalReport> {
    let mut all = IouCounts::default();
    let mut scores = Vec::with_capacity(clips.len());
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for (id, pred, gt) in clips {
        let k = mean_iou_counts(pred, gt)?;
        all.merge(&k);
        scores.push(ClipScore {
            id: id.clone(),
            iou: k.iou(),
        });
        preds.extend_from_slice(pred);
        gts.extend_from_slice(gt);
    }
    let band_curve = widths
        .iter()
        .map(|&w| Ok((w, band_iou(&preds, &gts, w)?.mean)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        clips: scores,
        mean: all.iou(),
        band_curve,
        counters: Counters::default(),
        attenuation_latency: None,
        refinement_latency: None,
    })
}

/// `width,iou` lines with a header.
pub fn band_curve_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("width,iou\n");
    for (w, v) in curve {
        s.push_str(&format!("{w},{v:.6}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_case() {
        let p = Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let g = Mask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let iou = mean_iou(&[p], &[g]).unwrap();
        assert_eq!(iou.foreground, 0.5);
        assert!((iou.background - 2.0 / 3.0).abs() < 1e-15);
        assert!((iou.mean - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn p95_is_nearest_rank() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        let l = LatencyStats::from_ms(&s).unwrap();
        assert_eq!(l.p95_ms, 19.0);
        assert_eq!(l.mean_ms, 10.5);
        assert!(LatencyStats::from_ms(&[]).is_none());
    }
}
