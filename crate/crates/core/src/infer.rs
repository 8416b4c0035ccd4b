//! Sliding-window inference over images of arbitrary size.
//!
//! The image is reflection-padded so that a whole number of tiles covers it,
//! logits of overlapping tiles are averaged per pixel, and the argmax is
//! cropped back to the original extent.

use std::str::FromStr;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::models::Gtnet;
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// How the second window parameter is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapMode {
    /// Pixels shared by adjacent tiles; step is `tile - overlap`.
    Overlap,
    /// Step between tile origins.
    Stride,
}

impl FromStr for OverlapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(Self::Overlap),
            "stride" => Ok(Self::Stride),
            _ => Err(Error::Config(format!("infer.mode must be overlap or stride, got {s:?}"))),
        }
    }
}

impl OverlapMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Overlap => "overlap",
            Self::Stride => "stride",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlidingWindowConfig {
    pub tile: usize,
    pub overlap: usize,
    pub mode: OverlapMode,
    /// Tiles evaluated per forward pass.
    pub batch: usize,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        Self {
            tile: 448,
            overlap: 32,
            mode: OverlapMode::Overlap,
            batch: 4,
        }
    }
}

impl SlidingWindowConfig {
    pub fn stride(&self) -> usize {
        match self.mode {
            OverlapMode::Overlap => self.tile.saturating_sub(self.overlap),
            OverlapMode::Stride => self.overlap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stride();
        if self.tile == 0 || s == 0 || s > self.tile || self.batch == 0 {
            return Err(Error::Config(format!(
                "window tile {} with {} {} gives step {s}; need 0 < step <= tile",
                self.tile,
                self.mode.as_str(),
                self.overlap
            )));
        }
        Ok(())
    }
}

/// Tile placement along one axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisLayout {
    pub len: usize,
    pub pad_before: usize,
    pub pad_after: usize,
    /// Tile origins in padded coordinates.
    pub origins: Vec<usize>,
}

impl AxisLayout {
    fn new(len: usize, tile: usize, stride: usize) -> Result<Self> {
        let count = if len <= tile { 1 } else { (len - tile).div_ceil(stride) + 1 };
        let padded = tile + (count - 1) * stride;
        let pad = padded - len;
        let pad_before = pad / 2;
        let pad_after = pad - pad_before;
        if pad_after >= len {
            return Err(Error::invalid(format!(
                "image side {len} too small for tile {tile}: reflection padding of {pad} pixels needs a side of at least {}",
                pad_after + 1
            )));
        }
        Ok(Self {
            len,
            pad_before,
            pad_after,
            origins: (0..count).map(|i| i * stride).collect(),
        })
    }

    pub fn padded(&self) -> usize {
        self.len + self.pad_before + self.pad_after
    }

    /// Reflected source index of padded coordinate `p` (edge not repeated).
    pub fn source(&self, p: usize) -> usize {
        let i = p as isize - self.pad_before as isize;
        let n = self.len as isize;
        let r = if i < 0 {
            -i
        } else if i >= n {
            2 * (n - 1) - i
        } else {
            i
        };
        r as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileLayout {
    pub tile: usize,
    pub rows: AxisLayout,
    pub cols: AxisLayout,
}

impl TileLayout {
    pub fn new(height: usize, width: usize, cfg: &SlidingWindowConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            tile: cfg.tile,
            rows: AxisLayout::new(height, cfg.tile, cfg.stride())?,
            cols: AxisLayout::new(width, cfg.tile, cfg.stride())?,
        })
    }

    /// Tile origins `(y, x)` in padded coordinates, row-major.
    pub fn tiles(&self) -> Vec<(usize, usize)> {
        self.rows
            .origins
            .iter()
            .flat_map(|&y| self.cols.origins.iter().map(move |&x| (y, x)))
            .collect()
    }

    /// Number of tiles covering each original pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let (h, w) = (self.rows.len, self.cols.len);
        let mut cov = vec![0u32; h * w];
        for (ty, tx) in self.tiles() {
            for y in ty..ty + self.tile {
                let Some(oy) = y.checked_sub(self.rows.pad_before).filter(|&v| v < h) else {
                    continue;
                };
                for x in tx..tx + self.tile {
                    if let Some(ox) = x.checked_sub(self.cols.pad_before).filter(|&v| v < w) {
                        cov[oy * w + ox] += 1;
                    }
                }
            }
        }
        cov
    }

    /// Cuts one `[C, tile, tile]` window from the reflection-padded image.
    pub fn extract<T: Real>(&self, image: &Tensor<T>, origin: (usize, usize)) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 3 || s[1] != self.rows.len || s[2] != self.cols.len {
            return Err(Error::shape("extract tile", s, &[self.rows.len, self.cols.len]));
        }
        let (c, w, t) = (s[0], s[2], self.tile);
        let d = image.data();
        let mut out = Vec::with_capacity(c * t * t);
        for ch in 0..c {
            for y in 0..t {
                let sy = self.rows.source(origin.0 + y);
                for x in 0..t {
                    let sx = self.cols.source(origin.1 + x);
                    out.push(d[(ch * s[1] + sy) * w + sx]);
                }
            }
        }
        Tensor::new(vec![c, t, t], out)
    }

    /// Averages per-tile maps `[K, tile, tile]` (in [`TileLayout::tiles`]
    /// order) over the original pixels.
    pub fn blend<T: Real>(&self, tiles: &[Tensor<T>]) -> Result<Tensor<T>> {
        let origins = self.tiles();
        if tiles.len() != origins.len() {
            return Err(Error::shape("blend", &[tiles.len()], &[origins.len()]));
        }
        let (h, w, t) = (self.rows.len, self.cols.len, self.tile);
        let k = tiles[0].shape()[0];
        let mut acc = vec![T::zero(); k * h * w];
        for (tile, &(ty, tx)) in tiles.iter().zip(&origins) {
            if tile.shape() != [k, t, t] {
                return Err(Error::shape("blend", tile.shape(), &[k, t, t]));
            }
            let d = tile.data();
            for y in 0..t {
                let Some(oy) = (ty + y).checked_sub(self.rows.pad_before).filter(|&v| v < h) else {
                    continue;
                };
                for x in 0..t {
                    let Some(ox) = (tx + x).checked_sub(self.cols.pad_before).filter(|&v| v < w) else {
                        continue;
                    };
                    for ch in 0..k {
                        acc[(ch * h + oy) * w + ox] += d[(ch * t + y) * t + x];
                    }
                }
            }
        }
        let cov = self.coverage();
        for ch in 0..k {
            for (a, &n) in acc[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&cov) {
                *a /= T::lit(n as f64);
            }
        }
        Tensor::new(vec![k, h, w], acc)
    }
}

/// Logits `[N, K, H, W]` of a batch, evaluated without gradient tracking.
pub fn forward_logits<T: Real>(g: &Gtnet, params: &ParamStore<T>, images: Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false)?;
    let x = tape.constant(images)?;
    let y = g.forward(&mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}

/// Per-pixel class of a `[K, H, W]` map; ties go to the lower class id.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (k, px) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..px)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * px + i] > d[best * px + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Averaged logits `[K, H, W]` of one `[C, H, W]` image.
pub fn sliding_window_logits<T: Real>(
    g: &Gtnet,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    cfg: &SlidingWindowConfig,
) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("sliding_window", s, &[0, 0, 0]));
    }
    let layout = TileLayout::new(s[1], s[2], cfg)?;
    let origins = layout.tiles();
    let (c, t) = (s[0], cfg.tile);
    let mut outputs = Vec::with_capacity(origins.len());
    for chunk in origins.chunks(cfg.batch) {
        let mut data = Vec::with_capacity(chunk.len() * c * t * t);
        for &o in chunk {
            data.extend_from_slice(layout.extract(image, o)?.data());
        }
        let logits = forward_logits(g, params, Tensor::new(vec![chunk.len(), c, t, t], data)?)?;
        let k = logits.shape()[1];
        for i in 0..chunk.len() {
            let part = logits.data()[i * k * t * t..(i + 1) * k * t * t].to_vec();
            outputs.push(Tensor::new(vec![k, t, t], part)?);
        }
    }
    layout.blend(&outputs)
}

/// Label map `H x W` of one `[C, H, W]` image.
pub fn sliding_window_infer<T: Real>(
    g: &Gtnet,
    params: &ParamStore<T>,
    image: &Tensor<T>,
    cfg: &SlidingWindowConfig,
) -> Result<Vec<u8>> {
    Ok(argmax_classes(&sliding_window_logits(g, params, image, cfg)?))
}
