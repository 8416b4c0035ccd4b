//! Geometric augmentation applied identically to image and label.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::SegSample;
use crate::error::Result;
use crate::tensor::Tensor;

pub const SCALES: [f64; 3] = [0.75, 1.0, 1.25];

/// One random draw. Rotation is `quarter_turns * 90` degrees clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u8,
    pub scale: f64,
}

impl AugmentDraw {
    pub const IDENTITY: Self = Self {
        hflip: false,
        vflip: false,
        quarter_turns: 0,
        scale: 1.0,
    };

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
            scale: SCALES[rng.random_range(0..SCALES.len())],
        }
    }
}

pub fn augment(sample: &SegSample, rng: &mut ChaCha8Rng) -> Result<SegSample> {
    apply(sample, AugmentDraw::sample(rng))
}

/// Flips, then rotates, then rescales with nearest-neighbour sampling and
/// center-crops or edge-pads back to the original size.
pub fn apply(sample: &SegSample, draw: AugmentDraw) -> Result<SegSample> {
    let (h, w) = (sample.height(), sample.width());
    let mut s = sample.clone();
    if draw.hflip {
        s = remap(&s, h, w, |y, x| (y, w - 1 - x))?;
    }
    if draw.vflip {
        s = remap(&s, h, w, |y, x| (h - 1 - y, x))?;
    }
    for _ in 0..draw.quarter_turns % 4 {
        let (sh, sw) = (s.height(), s.width());
        // Clockwise: output (y, x) of a [sw, sh] grid reads source (sh-1-x, y).
        s = remap(&s, sw, sh, |y, x| (sh - 1 - x, y))?;
    }
    if draw.scale != 1.0 || s.height() != h || s.width() != w {
        let (sh, sw) = (s.height(), s.width());
        let (rh, rw) = (
            ((sh as f64 * draw.scale).round() as usize).max(1),
            ((sw as f64 * draw.scale).round() as usize).max(1),
        );
        let (oy, ox) = (rh as isize - h as isize, rw as isize - w as isize);
        let (oy, ox) = (oy.div_euclid(2), ox.div_euclid(2));
        s = remap(&s, h, w, |y, x| {
            let ry = (y as isize + oy).clamp(0, rh as isize - 1) as usize;
            let rx = (x as isize + ox).clamp(0, rw as isize - 1) as usize;
            (((ry * sh) / rh).min(sh - 1), ((rx * sw) / rw).min(sw - 1))
        })?;
    }
    Ok(s)
}

/// Builds an `out_h x out_w` sample whose pixel `(y, x)` copies source pixel
/// `src(y, x)`.
fn remap(s: &SegSample, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Result<SegSample> {
    let (c, w) = (s.channels(), s.width());
    let plane = s.height() * w;
    let img = s.image.data();
    let mut image = vec![0f32; c * out_h * out_w];
    let mut label = vec![0u8; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = src(y, x);
            let (o, i) = (y * out_w + x, sy * w + sx);
            label[o] = s.label[i];
            for ch in 0..c {
                image[ch * out_h * out_w + o] = img[ch * plane + i];
            }
        }
    }
    SegSample::new(Tensor::new(vec![c, out_h, out_w], image)?, label)
}
