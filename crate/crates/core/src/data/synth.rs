//! Procedural clips: a jittering textured world with two moving textured
//! blobs, one foreground and one distractor.
//!
//! The two textures alternate roles per clip. A single frame cannot tell
//! which blob is foreground; the background samples (which show the
//! distractor but never the foreground) can.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BgError, Result};
use crate::frame::{Frame, Mask};

/// Texture seed used by every clip when appearance is shared.
const SHARED_SEED: u64 = 0x5eed_0bac;

/// Sub-samples per pixel axis when rasterizing blob coverage.
pub const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames_per_clip: usize,
    /// Unaligned background-only frames per clip.
    pub bg_samples: usize,
    /// Camera jitter amplitude in pixels.
    pub jitter: f64,
    /// Blend of the distractor texture into the foreground texture, in [0, 1].
    pub texture_sharing: f64,
    /// Swap the foreground and distractor textures on a per-clip coin flip.
    pub role_swap: bool,
    /// Foreground semi-axes as fractions of the smaller frame extent.
    pub blob_radius: (f64, f64),
    /// Amplitude of the angular boundary wobble (0 gives a plain ellipse).
    pub deformation: f64,
    /// Foreground speed in pixels per frame.
    pub speed: f64,
    pub distractor: bool,
    /// Every clip uses the same world and palette textures, so clips differ
    /// only in geometry, motion and texture roles.
    pub shared_appearance: bool,
    /// Ambiguity-suite training clips come in pairs with identical geometry
    /// and opposite texture roles, so geometry alone never predicts the role.
    pub twin_roles: bool,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            frames_per_clip: 8,
            bg_samples: 4,
            jitter: 2.0,
            texture_sharing: 0.0,
            role_swap: true,
            blob_radius: (0.18, 0.3),
            deformation: 0.12,
            speed: 1.5,
            distractor: true,
            shared_appearance: true,
            twin_roles: true,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BgError::Config(format!("scene spec: {m}")));
        if self.width < 8 || self.height < 8 {
            return bad("frames must be at least 8x8");
        }
        if self.frames_per_clip == 0 {
            return bad("clips need at least one frame");
        }
        if !(0.0..=1.0).contains(&self.texture_sharing) {
            return bad("texture_sharing outside [0, 1]");
        }
        if !(self.blob_radius.0 > 0.0 && self.blob_radius.0 <= self.blob_radius.1 && self.blob_radius.1 < 0.5) {
            return bad("blob_radius must satisfy 0 < lo <= hi < 0.5");
        }
        if !(0.0..0.5).contains(&self.deformation) || self.jitter < 0.0 || self.speed < 0.0 {
            return bad("deformation, jitter or speed out of range");
        }
        Ok(())
    }
}

/// Frames, exact masks and background samples of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
    pub bg_samples: Vec<Frame>,
}

impl Clip {
    pub fn validate(&self) -> Result<()> {
        let dims = self
            .frames
            .first()
            .ok_or_else(|| BgError::Data(format!("clip {} has no frames", self.id)))?
            .dims();
        let frames_ok = self.frames.iter().all(|f| f.dims() == dims);
        let masks_ok = self.masks.is_empty()
            || (self.masks.len() == self.frames.len() && self.masks.iter().all(|m| m.dims() == dims));
        let bg_ok = self.bg_samples.iter().all(|f| f.dims() == dims);
        if !(frames_ok && masks_ok && bg_ok) {
            return Err(BgError::Data(format!("clip {} mixes frame sizes", self.id)));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic lattice noise in [0, 1).
fn lattice(seed: u64, x: i64, y: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((x as u64).wrapping_mul(0x1f1f_1f1f) ^ (y as u64).wrapping_shl(32)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinearly smoothed lattice noise with period `cell` pixels.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (u, v) = (x / cell, y / cell);
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (xi, yi) = (x0 as i64, y0 as i64);
    let a = lattice(seed, xi, yi) * (1.0 - fx) + lattice(seed, xi + 1, yi) * fx;
    let b = lattice(seed, xi, yi + 1) * (1.0 - fx) + lattice(seed, xi + 1, yi + 1) * fx;
    a * (1.0 - fy) + b * fy
}

/// A two-color stripe pattern with noise.
#[derive(Debug, Clone, Copy)]
struct Texture {
    a: [f64; 3],
    b: [f64; 3],
    period: f64,
    angle: f64,
    seed: u64,
}

impl Texture {
    fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let (s, c) = self.angle.sin_cos();
        let t = ((x * c + y * s) / self.period * std::f64::consts::TAU).sin() * 0.5 + 0.5;
        let n = value_noise(self.seed, x, y, 3.0) * 0.3 - 0.15;
        std::array::from_fn(|i| (self.a[i] * (1.0 - t) + self.b[i] * t + n).clamp(0.0, 1.0))
    }

    fn blend(&self, other: &Texture, k: f64) -> Texture {
        let mix = |p: [f64; 3], q: [f64; 3]| std::array::from_fn(|i| p[i] * (1.0 - k) + q[i] * k);
        Texture {
            a: mix(self.a, other.a),
            b: mix(self.b, other.b),
            period: self.period * (1.0 - k) + other.period * k,
            angle: self.angle * (1.0 - k) + other.angle * k,
            seed: self.seed,
        }
    }
}

/// The two textures that trade foreground and distractor roles.
fn palette(seed: u64) -> [Texture; 2] {
    [
        Texture {
            a: [0.95, 0.55, 0.1],
            b: [0.75, 0.2, 0.05],
            period: 5.0,
            angle: 0.4,
            seed: seed ^ 1,
        },
        Texture {
            a: [0.1, 0.75, 0.8],
            b: [0.05, 0.3, 0.6],
            period: 5.0,
            angle: 1.9,
            seed: seed ^ 2,
        },
    ]
}

/// Star-shaped blob: an ellipse whose radius wobbles with angle.
#[derive(Debug, Clone, Copy)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub theta: f64,
    pub wobble: f64,
    pub lobes: f64,
    pub phase: f64,
}

impl Blob {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (u, v) = ((dx * c + dy * s) / self.rx, (-dx * s + dy * c) / self.ry);
        let r = (u * u + v * v).sqrt();
        let scale = 1.0 + self.wobble * (self.lobes * v.atan2(u) + self.phase).sin();
        r <= scale
    }

    /// Fraction of the pixel square at `(px, py)` covered by the blob.
    pub fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                hits += usize::from(self.contains(x, y));
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }

    /// Exact area when there is no wobble: `pi * rx * ry`.
    pub fn ellipse_area(&self) -> f64 {
        std::f64::consts::PI * self.rx * self.ry
    }
}

/// Rasterized mask of a blob: pixels with coverage above one half.
pub fn blob_mask(blob: &Blob, width: usize, height: usize) -> Mask {
    let data = (0..height)
        .flat_map(|y| (0..width).map(move |x| (y, x)))
        .map(|(y, x)| u8::from(blob.coverage(x, y) > 0.5))
        .collect();
    Mask { width, height, data }
}

struct Scene {
    world: Texture,
    world_seed: u64,
}

impl Scene {
    /// Background color at world coordinates.
    fn background(&self, wx: f64, wy: f64) -> [f64; 3] {
        let base = self.world.sample(wx, wy);
        let shade = value_noise(self.world_seed, wx, wy, 12.0) * 0.2 - 0.1;
        base.map(|v| (v + shade).clamp(0.0, 1.0))
    }

    /// Paints `layers` bottom to top over the world; the mask is the visible
    /// coverage of layer `fg` above one half.
    fn render(&self, w: usize, h: usize, cam: (f64, f64), layers: &[(&Blob, &Texture)], fg: Option<usize>) -> (Frame, Mask) {
        let mut data = Vec::with_capacity(w * h * 3);
        let mut mask = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut c = self.background(x as f64 + 0.5 + cam.0, y as f64 + 0.5 + cam.1);
                let mut visible = 0.0;
                for (k, (b, tex)) in layers.iter().enumerate() {
                    let a = b.coverage(x, y);
                    if a > 0.0 {
                        let t = tex.sample(x as f64 + 0.5 - b.cx, y as f64 + 0.5 - b.cy);
                        c = std::array::from_fn(|i| a * t[i] + (1.0 - a) * c[i]);
                    }
                    if Some(k) == fg {
                        visible = a;
                    } else {
                        visible *= 1.0 - a;
                    }
                }
                data.extend(c.iter().map(|&v| (v * 255.0).round() as u8));
                mask.push(u8::from(visible > 0.5));
            }
        }
        (
            Frame {
                width: w,
                height: h,
                data,
            },
            Mask {
                width: w,
                height: h,
                data: mask,
            },
        )
    }
}

/// A blob bouncing inside the central part of the frame.
struct Actor {
    blob: Blob,
    vx: f64,
    vy: f64,
}

impl Actor {
    fn advance(&mut self, w: f64, h: f64) {
        let b = &mut self.blob;
        b.cx += self.vx;
        b.cy += self.vy;
        if b.cx < w * 0.2 || b.cx > w * 0.8 {
            self.vx = -self.vx;
        }
        if b.cy < h * 0.2 || b.cy > h * 0.8 {
            self.vy = -self.vy;
        }
        b.phase += 0.3;
        b.theta += 0.05;
    }
}

/// Renders one clip; identical `(spec, seed)` give identical clips.
pub fn render_clip(spec: &SyntheticSceneSpec, seed: u64, id: impl Into<String>) -> Result<Clip> {
    render_clip_with_role(spec, seed, id, None)
}

/// As [`render_clip`], with the role coin flip optionally forced (`true`
/// swaps). Ignored when `role_swap` is off. Both roles of one seed render
/// identical frames: only the masks and the background samples differ.
pub fn render_clip_with_role(
    spec: &SyntheticSceneSpec,
    seed: u64,
    id: impl Into<String>,
    swap: Option<bool>,
) -> Result<Clip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let side = w.min(h);
    let palette_seed: u64 = rng.random();
    let [t0, t1] = palette(if spec.shared_appearance { SHARED_SEED } else { palette_seed });
    let coin = rng.random_bool(0.5);
    let swap = spec.role_swap && spec.distractor && swap.unwrap_or(coin);
    let (angle, world_seed, noise_seed): (f64, u64, u64) = (rng.random_range(0.0..3.1), rng.random(), rng.random());
    let scene = Scene {
        world: Texture {
            a: [0.45, 0.5, 0.4],
            b: [0.3, 0.4, 0.3],
            period: 11.0,
            angle: if spec.shared_appearance { 0.7 } else { angle },
            seed: if spec.shared_appearance { SHARED_SEED } else { world_seed },
        },
        world_seed: if spec.shared_appearance { SHARED_SEED ^ 3 } else { noise_seed },
    };
    let (lo, hi) = spec.blob_radius;
    // Both actors share one shape and motion distribution.
    let random_blob = |rng: &mut ChaCha8Rng| Blob {
        cx: w * rng.random_range(0.25..0.75),
        cy: h * rng.random_range(0.25..0.75),
        rx: side * rng.random_range(lo..=hi),
        ry: side * rng.random_range(lo..=hi),
        theta: rng.random_range(0.0..3.1),
        wobble: spec.deformation,
        lobes: rng.random_range(2..5) as f64,
        phase: rng.random_range(0.0..6.28),
    };
    let random_actor = |rng: &mut ChaCha8Rng| {
        let blob = random_blob(rng);
        let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        Actor {
            blob,
            vx: spec.speed * heading.cos(),
            vy: spec.speed * heading.sin(),
        }
    };
    // Actor 0 wears texture 0 and is drawn first; actor 1 wears texture 1.
    let mut actors = vec![random_actor(&mut rng)];
    if spec.distractor {
        actors.push(random_actor(&mut rng));
    }
    let fg = usize::from(swap);
    let mut textures = [t0, t1];
    if spec.distractor {
        textures[fg] = textures[fg].blend(&textures[1 - fg], spec.texture_sharing);
    }

    let mut cam = (0.0, 0.0);
    let mut frames = Vec::with_capacity(spec.frames_per_clip);
    let mut masks = Vec::with_capacity(spec.frames_per_clip);
    for _ in 0..spec.frames_per_clip {
        let layers: Vec<(&Blob, &Texture)> = actors.iter().zip(&textures).map(|(a, t)| (&a.blob, t)).collect();
        let (f, m) = scene.render(spec.width, spec.height, cam, &layers, Some(fg));
        frames.push(f);
        masks.push(m);
        for a in &mut actors {
            a.advance(w, h);
        }
        if spec.jitter > 0.0 {
            let j = spec.jitter;
            cam.0 = (cam.0 + rng.random_range(-1.0..1.0)).clamp(-j, j);
            cam.1 = (cam.1 + rng.random_range(-1.0..1.0)).clamp(-j, j);
        }
    }
    // Background samples: random camera offsets with the distractor at a
    // fresh position, never the foreground.
    let reach = spec.jitter.max(1.0) * 2.0;
    let bg_samples = (0..spec.bg_samples)
        .map(|_| {
            let off = (rng.random_range(-reach..=reach), rng.random_range(-reach..=reach));
            let d = random_blob(&mut rng);
            let layers: Vec<(&Blob, &Texture)> = if spec.distractor {
                vec![(&d, &textures[1 - fg])]
            } else {
                Vec::new()
            };
            scene.render(spec.width, spec.height, off, &layers, None).0
        })
        .collect();
    Ok(Clip {
        id: id.into(),
        frames,
        masks,
        bg_samples,
    })
}

/// Train and test clips of the ambiguity suite; clip seeds derive from `seed`.
pub fn ambiguity_suite(
    spec: &SyntheticSceneSpec,
    train: usize,
    test: usize,
    seed: u64,
) -> Result<(Vec<Clip>, Vec<Clip>)> {
    let clip_seed = |i: usize| splitmix(seed.wrapping_mul(0x100_0193) ^ i as u64);
    let train_clips = (0..train)
        .map(|i| {
            let id = format!("train{i:03}");
            if spec.twin_roles {
                render_clip_with_role(spec, clip_seed(i / 2), id, Some(i % 2 == 1))
            } else {
                render_clip(spec, clip_seed(i), id)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let test_clips = (0..test)
        .map(|i| render_clip(spec, clip_seed(train + i), format!("test{i:03}")))
        .collect::<Result<Vec<_>>>()?;
    Ok((train_clips, test_clips))
}
