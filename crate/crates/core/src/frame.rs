//! 8-bit frames and binary masks, and their conversion to network tensors.

use std::path::Path;

use bgcut_tensor::{Labels, Scalar, Tensor};

use crate::error::{BgError, Result};

/// Interleaved RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Per-pixel labels: 0 background, 1 foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(BgError::Data(format!("{width}x{height} frame with {} bytes", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Copies the `h x w` window at `(y0, x0)`, optionally mirrored horizontally.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize, flip: bool) -> Frame {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            for i in 0..w {
                let x = if flip { x0 + w - 1 - i } else { x0 + i };
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Frame { width: w, height: h, data }
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, width: usize, height: usize) -> Frame {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                data.extend_from_slice(&self.pixel(sy, (x * self.width) / width));
            }
        }
        Frame { width, height, data }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| BgError::Image {
                path: path.into(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Frame::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, image::ColorType::Rgb8)
            .map_err(|source| BgError::Image {
                path: path.into(),
                source,
            })
    }
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height || data.iter().any(|&v| v > 1) {
            return Err(BgError::Data(format!("invalid {width}x{height} mask")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        Self {
            width,
            height,
            data: vec![label.min(1); width * height],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize, flip: bool) -> Mask {
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            for i in 0..w {
                let x = if flip { x0 + w - 1 - i } else { x0 + i };
                data.push(self.at(y, x));
            }
        }
        Mask { width: w, height: h, data }
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Reads an 8-bit PNG; values above 127 are foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| BgError::Image {
                path: path.into(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
        Mask::new(w as usize, h as usize, data)
    }

    /// Writes values {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| v * 255).collect();
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, image::ColorType::L8)
            .map_err(|source| BgError::Image {
                path: path.into(),
                source,
            })
    }
}

fn check_dims(mut dims: impl Iterator<Item = (usize, usize)>) -> Result<(usize, usize)> {
    let first = dims.next().ok_or_else(|| BgError::Data("no frames".into()))?;
    if let Some(other) = dims.find(|&d| d != first) {
        return Err(BgError::Data(format!("mixed frame sizes {first:?} and {other:?}")));
    }
    Ok(first)
}

/// `[N, 3, H, W]`, channels scaled to roughly unit range around zero.
pub fn frames_to_tensor<T: Scalar>(frames: &[&Frame]) -> Result<Tensor<T>> {
    let (h, w) = check_dims(frames.iter().map(|f| f.dims()))?;
    let plane = h * w;
    let mut out = vec![T::zero(); frames.len() * 3 * plane];
    for (s, f) in frames.iter().enumerate() {
        for p in 0..plane {
            for c in 0..3 {
                out[(s * 3 + c) * plane + p] = T::lit((f.data[p * 3 + c] as f64 / 255.0 - 0.5) * 4.0);
            }
        }
    }
    Ok(Tensor::new([frames.len(), 3, h, w], out)?)
}

pub fn masks_to_labels(masks: &[&Mask]) -> Result<Labels> {
    let (h, w) = check_dims(masks.iter().map(|m| m.dims()))?;
    let data = masks.iter().flat_map(|m| m.data.iter().copied()).collect();
    Ok(Labels::new([masks.len(), h, w], data)?)
}

/// Per-pixel argmax of a `[1, 2, H, W]` score tensor; ties go to background.
pub fn argmax_mask<T: Scalar>(scores: &Tensor<T>) -> Result<Mask> {
    let (n, c, h, w) = scores.dims4("argmax_mask")?;
    if n != 1 || c != 2 {
        return Err(BgError::Data(format!("expected [1, 2, H, W] scores, got {:?}", scores.shape())));
    }
    let plane = h * w;
    let (bg, fg) = scores.data().split_at(plane);
    let data = bg.iter().zip(fg).map(|(b, f)| u8::from(f > b)).collect();
    Ok(Mask { width: w, height: h, data })
}
