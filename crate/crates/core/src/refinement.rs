//! Spatial-temporal refinement: an encoder-decoder over the score maps and
//! color frames of a `2n + 1` window that re-scores the center frame.

use bgcut_tensor::{ConvGeometry, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attenuation::ScoreMap;
use crate::checkpoint::Archive;
use crate::error::{BgError, Result};
use crate::frame::{frames_to_tensor, Frame};
use crate::nn::{join, Conv2d, ConvTranspose2d, Module, Slot, SlotMut};

/// Spatial extents are padded up to a multiple of this.
pub const ALIGN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    /// Every frame of the window.
    All,
    /// Only the center frame.
    Center,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    /// Temporal radius; the window holds `2n + 1` frames.
    pub n: usize,
    pub encoder_channels: [usize; 3],
    pub guidance: Guidance,
    /// Add the center frame's input logits to the decoder output.
    pub residual: bool,
    /// Sum same-size encoder maps into the decoder.
    pub skip_fusion: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            n: 2,
            encoder_channels: [32, 64, 128],
            guidance: Guidance::All,
            residual: true,
            skip_fusion: true,
        }
    }
}

impl RefinementConfig {
    pub fn window(&self) -> usize {
        2 * self.n + 1
    }

    pub fn in_channels(&self) -> usize {
        let guide = match self.guidance {
            Guidance::All => self.window(),
            Guidance::Center => 1,
        };
        self.window() * 2 + guide * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.contains(&0) {
            return Err(BgError::Config("refinement channels must be positive".into()));
        }
        Ok(())
    }
}

/// Score maps and color frames of one window, in temporal order.
#[derive(Debug, Clone)]
pub struct ScoreStack<'a, T> {
    pub scores: Vec<&'a ScoreMap<T>>,
    pub guidance: Vec<&'a Frame>,
    pub center_index: usize,
}

#[derive(Debug, Clone)]
pub struct RefinementNet<T> {
    config: RefinementConfig,
    pub enc: [Conv2d<T>; 3],
    pub dec: [ConvTranspose2d<T>; 3],
}

impl<T: Scalar> RefinementNet<T> {
    pub fn build(config: RefinementConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x12ef_0003);
        let [c1, c2, c3] = config.encoder_channels;
        let g = ConvGeometry::new(2, 1, 1);
        let enc = [
            Conv2d::he(config.in_channels(), c1, 3, g, true, &mut rng),
            Conv2d::he(c1, c2, 3, g, true, &mut rng),
            Conv2d::he(c2, c3, 3, g, true, &mut rng),
        ];
        let mut last = ConvTranspose2d::he(c1, 2, 4, 2, 1, &mut rng);
        if config.residual {
            // Start as the identity on the center logits.
            last.weight.set(Tensor::zeros([c1, 2, 4, 4]));
        }
        let dec = [
            ConvTranspose2d::he(c3, c2, 4, 2, 1, &mut rng),
            ConvTranspose2d::he(c2, c1, 4, 2, 1, &mut rng),
            last,
        ];
        Ok(Self { config, enc, dec })
    }

    pub fn config(&self) -> &RefinementConfig {
        &self.config
    }

    /// Encoder-decoder on an assembled input `[B, Cin, H, W]`; `center` holds the
    /// center logits `[B, 2, H, W]` for the residual path.
    pub fn forward_input(&mut self, tape: &mut Tape<T>, input: Var, center: Var) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape[1] != self.config.in_channels() {
            return Err(BgError::Data(format!(
                "refinement expects {} input channels, got {}",
                self.config.in_channels(),
                shape[1]
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let (ph, pw) = (h.next_multiple_of(ALIGN) - h, w.next_multiple_of(ALIGN) - w);
        let x = if ph + pw > 0 { tape.pad_bottom_right(input, ph, pw)? } else { input };
        let e1 = self.enc[0].forward(tape, x)?;
        let e1 = tape.relu(e1)?;
        let e2 = self.enc[1].forward(tape, e1)?;
        let e2 = tape.relu(e2)?;
        let e3 = self.enc[2].forward(tape, e2)?;
        let e3 = tape.relu(e3)?;
        let mut d = self.dec[0].forward(tape, e3)?;
        if self.config.skip_fusion {
            d = tape.add(d, e2)?;
        }
        let d = tape.relu(d)?;
        let mut d = self.dec[1].forward(tape, d)?;
        if self.config.skip_fusion {
            d = tape.add(d, e1)?;
        }
        let d = tape.relu(d)?;
        let mut y = self.dec[2].forward(tape, d)?;
        if ph + pw > 0 {
            y = tape.crop_top_left(y, h, w)?;
        }
        if self.config.residual {
            y = tape.add(y, center)?;
        }
        Ok(y)
    }

    /// Refined center logits `[B, 2, H, W]` from window scores `[B * W, 2, H, W]`
    /// and window frames `[B * W, 3, H, W]`, both item-major.
    pub fn forward(&mut self, tape: &mut Tape<T>, scores: Var, frames: &Tensor<T>) -> Result<Var> {
        let win = self.config.window();
        let s = tape.value(scores).shape().to_vec();
        if s[0] % win != 0 || frames.shape() != [s[0], 3, s[2], s[3]] {
            return Err(BgError::Data(format!(
                "refinement window {win}: scores {s:?}, frames {:?}",
                frames.shape()
            )));
        }
        let b = s[0] / win;
        let (h, w) = (s[2], s[3]);
        let stacked = tape.reshape(scores, &[b, win * 2, h, w])?;
        let guide = match self.config.guidance {
            Guidance::All => frames.reshape([b, win * 3, h, w])?,
            Guidance::Center => {
                let idx: Vec<usize> = (0..b).map(|i| i * win + self.config.n).collect();
                frames.select(0, &idx)?
            }
        };
        let guide = tape.constant(guide);
        let input = tape.concat_channels(&[stacked, guide])?;
        let center = tape.slice_channels(stacked, self.config.n * 2, 2)?;
        self.forward_input(tape, input, center)
    }

    pub fn refine(&mut self, stack: &ScoreStack<'_, T>) -> Result<ScoreMap<T>> {
        let win = self.config.window();
        if stack.scores.len() != win || stack.guidance.len() != win {
            return Err(BgError::Data(format!(
                "stack holds {} scores and {} frames, window is {win}",
                stack.scores.len(),
                stack.guidance.len()
            )));
        }
        let parts: Vec<&Tensor<T>> = stack.scores.iter().map(|s| &s.scores).collect();
        let scores = Tensor::stack_batch(&parts)?;
        let frames = frames_to_tensor(&stack.guidance)?;
        if scores.shape()[2..] != frames.shape()[2..] {
            return Err(BgError::Data("score and frame sizes differ inside the stack".into()));
        }
        let mut tape = Tape::inference();
        let sv = tape.constant(scores);
        let y = self.forward(&mut tape, sv, &frames)?;
        Ok(ScoreMap {
            scores: tape.value(y).clone(),
            frame_index: stack.center_index,
        })
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str) {
        archive.put_json(join(prefix, "config"), &self.config);
        archive.put_module(prefix, self);
    }

    pub fn load_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let config: RefinementConfig = archive.json(&join(prefix, "config"))?;
        let mut net = Self::build(config, 0)?;
        archive.load_module(prefix, &mut net)?;
        Ok(net)
    }
}

impl<T: Scalar> Module<T> for RefinementNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        for (i, c) in self.enc.iter().enumerate() {
            c.visit(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, d) in self.dec.iter().enumerate() {
            d.visit(&join(prefix, &format!("dec{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'_, T>)) {
        for (i, c) in self.enc.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("enc{i}")), f);
        }
        for (i, d) in self.dec.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("dec{i}")), f);
        }
    }
}
