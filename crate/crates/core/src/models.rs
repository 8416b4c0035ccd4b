//! GTNet generator and the conditional discriminator.
//!
//! GTNet: patch partition and embedding, then per stage a residual
//! convolution block followed by GT blocks, with patch merging between
//! stages. The decoder upsamples with transposed convolutions and fuses each
//! encoder stage through a skip connection (concatenation + 1x1 reduction),
//! ending with a full-resolution head that also sees the input image.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::glam::{Glam, GlamConfig};
use crate::nn::{to_spatial, to_tokens, Bound, Conv2d, ConvTranspose2d, LayerNorm, Linear, ParamStore};
use crate::slh::BucketAssignment;
use crate::tensor::{permute, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GtnetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    /// Target mean bucket occupancy; with `reference_size` it fixes the
    /// bucket count of each stage.
    pub tokens_per_bucket: usize,
    /// Input side length the bucket counts are sized for.
    pub reference_size: usize,
    /// Hidden width of the ASS head; 0 means "same as the stage width".
    pub ass_hidden: usize,
    pub mlp_ratio: usize,
    /// Channels of the full-resolution decoder head.
    pub head_width: usize,
    pub seed: u64,
}

impl Default for GtnetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            num_classes: 5,
            patch_size: 4,
            stage_widths: vec![32, 64, 128],
            stage_depths: vec![2, 2, 2],
            tokens_per_bucket: 16,
            reference_size: 64,
            ass_hidden: 0,
            mlp_ratio: 4,
            head_width: 16,
            seed: 0,
        }
    }
}

impl GtnetConfig {
    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.patch_size << (self.stages().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_depths.len() {
            return bad("model.stage_widths and model.stage_depths must be non-empty and equally long");
        }
        if self.in_channels == 0 || self.num_classes < 2 || self.patch_size == 0 {
            return bad("model.in_channels, model.patch_size must be positive and model.num_classes >= 2");
        }
        if self.stage_widths.contains(&0) || self.tokens_per_bucket == 0 || self.mlp_ratio == 0 || self.head_width == 0 {
            return bad("widths, tokens_per_bucket, mlp_ratio and head_width must be positive");
        }
        if self.reference_size % self.size_multiple() != 0 {
            return bad("model.input_size must be a multiple of patch_size * 2^(stages-1)");
        }
        Ok(())
    }

    /// Hash buckets of stage `s`, clamped to `[1, width]` so the projection
    /// rows stay orthonormal.
    pub fn stage_buckets(&self, s: usize) -> usize {
        let side = self.reference_size / self.patch_size >> s;
        let tokens = side * side;
        ((tokens as f64 / self.tokens_per_bucket as f64).round() as usize).clamp(1, self.stage_widths[s])
    }

    pub fn stage_ass_hidden(&self, s: usize) -> usize {
        if self.ass_hidden == 0 {
            self.stage_widths[s]
        } else {
            self.ass_hidden
        }
    }

    /// Error describing how much padding makes `h x w` admissible.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if h % m != 0 || w % m != 0 {
            let pad = |d: usize| (m - d % m) % m;
            return Err(Error::invalid(format!(
                "input {h}x{w} must be a multiple of {m}; pad by {}x{} pixels",
                pad(h),
                pad(w)
            )));
        }
        Ok(())
    }
}

/// Non-overlapping `p x p` patches: `[N,C,H,W] -> [N,(H/p)(W/p),C*p*p]`,
/// each token ordered as `(channel, dy, dx)`.
pub fn patch_partition<T: Real>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = partition_shape(x.shape(), p)?;
    let y = permute(&x.reshape(&[s[0], s[1], s[2] / p, p, s[3] / p, p])?, &[0, 2, 4, 1, 3, 5]);
    y.reshape(&[s[0], (s[2] / p) * (s[3] / p), s[1] * p * p])
}

/// Inverse of [`patch_partition`].
pub fn patch_unpartition<T: Real>(tokens: &Tensor<T>, channels: usize, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    let n = tokens.shape()[0];
    let y = tokens.reshape(&[n, h / p, w / p, channels, p, p])?;
    permute(&y, &[0, 3, 1, 4, 2, 5]).reshape(&[n, channels, h, w])
}

fn partition_shape(shape: &[usize], p: usize) -> Result<Vec<usize>> {
    if shape.len() != 4 {
        return Err(Error::shape("patch_partition", shape, &[p]));
    }
    let (h, w) = (shape[2], shape[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        let pad = |d: usize| (p - d % p) % p;
        return Err(Error::invalid(format!(
            "image {h}x{w} not divisible by patch size {p}; pad by {}x{} pixels",
            pad(h),
            pad(w)
        )));
    }
    Ok(shape.to_vec())
}

/// Tape version of [`patch_partition`].
pub fn patch_partition_tape<T: Real>(tape: &mut Tape<T>, x: Var, p: usize) -> Result<Var> {
    let s = partition_shape(tape.shape(x), p)?;
    let y = tape.reshape(x, &[s[0], s[1], s[2] / p, p, s[3] / p, p])?;
    let y = tape.permute(y, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(y, &[s[0], (s[2] / p) * (s[3] / p), s[1] * p * p])
}

/// 2x2 neighbourhood concatenation `[N,h*w,c] -> [N,(h/2)(w/2),4c]`, ordered
/// `(dy, dx, channel)`.
pub fn merge_neighbourhoods<T: Real>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape("patch_merge", &s, &[h, w]));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("patch_merge needs even grid sides, got {h}x{w}")));
    }
    let c = s[2];
    let y = tape.reshape(x, &[s[0], h / 2, 2, w / 2, 2, c])?;
    let y = tape.permute(y, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(y, &[s[0], (h / 2) * (w / 2), 4 * c])
}

/// Patch merging: neighbourhood concatenation then a linear reduction.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            reduce: Linear::new(store, name, 4 * c_in, c_out, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = merge_neighbourhoods(tape, x, h, w)?;
        self.reduce.forward(tape, p, y)
    }
}

/// Pre-norm transformer block with GLAM as the token mixer.
#[derive(Debug, Clone)]
pub struct GtBlock {
    pub norm1: LayerNorm,
    pub glam: Glam,
    pub attn_out: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl GtBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        glam: GlamConfig,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let c = glam.dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            glam: Glam::new(store, &format!("{name}.glam"), glam, rng)?,
            attn_out: Linear::new(store, &format!("{name}.attn_out"), c, c, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            fc1: Linear::new(store, &format!("{name}.fc1"), c, mlp_ratio * c, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_ratio * c, c, rng),
        })
    }

    /// `x: [N, n, c] -> [N, n, c]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let buckets = self.glam.assign(tape, p, h)?;
        self.forward_with(tape, p, x, h, Arc::new(buckets))
    }

    /// Forward pass with the bucket assignment of the normalized input
    /// fixed in advance (used by gradient checks to hold hashing constant).
    pub fn forward_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        normed: Var,
        buckets: Arc<Vec<BucketAssignment>>,
    ) -> Result<Var> {
        let a = self.glam.forward_with(tape, p, normed, buckets)?;
        let a = self.attn_out.forward(tape, p, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Two 3x3 convolutions with an identity skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1, rng),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, p, h)?;
        let y = tape.add(x, h)?;
        tape.relu(y)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStage {
    pub res: ResBlock,
    pub blocks: Vec<GtBlock>,
    pub merge: Option<PatchMerge>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: ConvTranspose2d,
    pub fuse: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Gtnet {
    pub config: GtnetConfig,
    pub embed: Linear,
    pub encoder: Vec<EncoderStage>,
    /// Ordered deepest first.
    pub decoder: Vec<DecoderStage>,
    pub head_up: ConvTranspose2d,
    pub head_fuse: Conv2d,
    pub head_out: Conv2d,
}

impl Gtnet {
    pub fn new<T: Real>(config: GtnetConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let widths = &config.stage_widths;
        let p = config.patch_size;
        let embed = Linear::new(&mut store, "embed", config.in_channels * p * p, widths[0], &mut rng);
        let mut encoder = Vec::with_capacity(config.stages());
        for (s, (&c, &depth)) in widths.iter().zip(&config.stage_depths).enumerate() {
            let res = ResBlock::new(&mut store, &format!("enc{s}.res"), c, &mut rng);
            let glam = GlamConfig {
                dim: c,
                ass_hidden: config.stage_ass_hidden(s),
                buckets: config.stage_buckets(s),
                hash_seed: config.seed.wrapping_mul(1_000_003).wrapping_add(s as u64),
            };
            let blocks = (0..depth)
                .map(|b| {
                    let glam = GlamConfig {
                        hash_seed: glam.hash_seed.wrapping_add(7919 * b as u64),
                        ..glam
                    };
                    GtBlock::new(&mut store, &format!("enc{s}.gt{b}"), glam, config.mlp_ratio, &mut rng)
                })
                .collect::<Result<_>>()?;
            let merge = widths
                .get(s + 1)
                .map(|&next| PatchMerge::new(&mut store, &format!("enc{s}.merge"), c, next, &mut rng));
            encoder.push(EncoderStage { res, blocks, merge });
        }
        let decoder = (1..config.stages())
            .rev()
            .map(|s| {
                let (c, skip) = (widths[s], widths[s - 1]);
                DecoderStage {
                    up: ConvTranspose2d::new(&mut store, &format!("dec{s}.up"), c, skip, 2, 2, &mut rng),
                    fuse: Conv2d::new(&mut store, &format!("dec{s}.fuse"), 2 * skip, skip, 1, 1, 0, &mut rng),
                }
            })
            .collect();
        let hw = config.head_width;
        let head_up = ConvTranspose2d::new(&mut store, "head.up", widths[0], hw, p, p, &mut rng);
        let head_fuse = Conv2d::new(&mut store, "head.fuse", hw + config.in_channels, hw, 1, 1, 0, &mut rng);
        let head_out = Conv2d::new(&mut store, "head.out", hw, config.num_classes, 1, 1, 0, &mut rng);
        let net = Self {
            config,
            embed,
            encoder,
            decoder,
            head_up,
            head_fuse,
            head_out,
        };
        Ok((net, store))
    }

    /// `image: [N,C,H,W] -> logits [N,K,H,W]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape("gtnet", &s, &[self.config.in_channels]));
        }
        self.config.check_input(s[2], s[3])?;
        let ps = self.config.patch_size;
        let (mut h, mut w) = (s[2] / ps, s[3] / ps);
        let tokens = patch_partition_tape(tape, image, ps)?;
        let mut x = self.embed.forward(tape, p, tokens)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let spatial = to_spatial(tape, x, h, w)?;
            let spatial = stage.res.forward(tape, p, spatial)?;
            x = to_tokens(tape, spatial)?;
            for block in &stage.blocks {
                x = block.forward(tape, p, x)?;
            }
            skips.push((to_spatial(tape, x, h, w)?, h, w));
            if let Some(merge) = &stage.merge {
                x = merge.forward(tape, p, x, h, w)?;
                h /= 2;
                w /= 2;
            }
        }
        let (mut y, _, _) = skips.pop().expect("at least one stage");
        for dec in &self.decoder {
            let (skip, sh, sw) = skips.pop().expect("one skip per decoder stage");
            y = dec.up.forward(tape, p, y)?;
            if tape.shape(y)[2..] != [sh, sw] {
                return Err(Error::shape("gtnet skip", tape.shape(y), tape.shape(skip)));
            }
            y = tape.concat(&[y, skip], 1)?;
            y = dec.fuse.forward(tape, p, y)?;
            y = tape.gelu(y)?;
        }
        y = self.head_up.forward(tape, p, y)?;
        y = tape.concat(&[y, image], 1)?;
        y = self.head_fuse.forward(tape, p, y)?;
        y = tape.gelu(y)?;
        self.head_out.forward(tape, p, y)
    }
}

/// Per-pixel class probabilities `[N,K,H,W]` from logits.
pub fn class_probabilities<T: Real>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let y = tape.permute(logits, &[0, 2, 3, 1])?;
    let y = tape.softmax(y)?;
    tape.permute(y, &[0, 3, 1, 2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    /// Image channels; the conditioning map adds `num_classes` more.
    pub image_channels: usize,
    pub num_classes: usize,
    pub widths: [usize; 4],
    pub kernel: usize,
    pub stride: usize,
    pub negative_slope: f64,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            num_classes: 5,
            widths: [32, 64, 128, 1],
            kernel: 4,
            stride: 2,
            negative_slope: 0.2,
            seed: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn in_channels(&self) -> usize {
        self.image_channels + self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.kernel == 0 || self.stride == 0 || self.widths[3] != 1 {
            return Err(Error::Config("disc.widths must be positive and end in 1; kernel and stride positive".into()));
        }
        Ok(())
    }
}

/// Four strided convolutions, global mean pooling, sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new<T: Real>(config: DiscriminatorConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let pad = (config.kernel - 1) / 2;
        let mut c_in = config.in_channels();
        let mut convs = Vec::with_capacity(4);
        for (i, &c_out) in config.widths.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut store,
                &format!("disc.conv{i}"),
                c_in,
                c_out,
                config.kernel,
                config.stride,
                pad,
                &mut rng,
            ));
            c_in = c_out;
        }
        Ok((Self { config, convs }, store))
    }

    /// Pre-sigmoid score per sample, `[N]`. `input` is the concatenation of
    /// image and class map, `[N, C+K, H, W]`.
    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, input: Var) -> Result<Var> {
        let s = tape.shape(input).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels() {
            return Err(Error::shape("discriminator", &s, &[self.config.in_channels()]));
        }
        let mut y = input;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(tape, p, y)?;
            if i + 1 < self.convs.len() {
                y = tape.leaky_relu(y, self.config.negative_slope)?;
            }
        }
        let sy = tape.shape(y).to_vec();
        let flat = tape.reshape(y, &[sy[0], sy[2] * sy[3]])?;
        let pooled = tape.sum_axis(flat, 1)?;
        tape.scale(pooled, 1.0 / (sy[2] * sy[3]) as f64)
    }

    /// `D(map | image)` in (0, 1), one value per sample.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, class_map: Var, image: Var) -> Result<Var> {
        let input = self.condition(tape, class_map, image)?;
        let z = self.logits(tape, p, input)?;
        tape.sigmoid(z)
    }

    /// Concatenates image and class map along channels.
    pub fn condition<T: Real>(&self, tape: &mut Tape<T>, class_map: Var, image: Var) -> Result<Var> {
        let (sm, si) = (tape.shape(class_map).to_vec(), tape.shape(image).to_vec());
        if sm.len() != 4 || si.len() != 4 || sm[0] != si[0] || sm[2..] != si[2..] {
            return Err(Error::shape("discriminator", &sm, &si));
        }
        if sm[1] != self.config.num_classes || si[1] != self.config.image_channels {
            return Err(Error::shape(
                "discriminator",
                &[sm[1], si[1]],
                &[self.config.num_classes, self.config.image_channels],
            ));
        }
        tape.concat(&[image, class_map], 1)
    }
}
