//! Segmentation and adversarial objectives.
//!
//! Batched tensors are `[N, K, H, W]`; label maps are flat `u8` class ids in
//! `[N, H, W]` order. Every reduction averages over the whole batch.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{class_probabilities, Discriminator};
use crate::nn::Bound;
use crate::tensor::{Real, Tensor};

/// Smoothing added to numerator and denominator of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Discriminator outputs are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// Weights of the structural and adversarial terms in the generator
/// objective. Cross-entropy always has weight 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mse: f64,
    pub dice: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 0.5,
            dice: 0.5,
            adversarial: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("mse", self.mse), ("dice", self.dice), ("adversarial", self.adversarial)] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("loss weight {name} = {w} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn check_labels(labels: &[u8], n: usize, k: usize, h: usize, w: usize) -> Result<()> {
    if labels.len() != n * h * w {
        return Err(Error::shape("labels", &[labels.len()], &[n, h, w]));
    }
    if let Some(pos) = labels.iter().position(|&l| l as usize >= k) {
        let (b, r, c) = (pos / (h * w), pos / w % h, pos % w);
        return Err(Error::invalid(format!(
            "label {} out of range [0, {k}) at sample {b}, row {r}, col {c}",
            labels[pos]
        )));
    }
    Ok(())
}

fn nkhw<T: Real>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [n, k, h, w] => Ok([n, k, h, w]),
        ref s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
    }
}

/// One-hot encoding `[N, K, H, W]` of a label batch.
pub fn one_hot<T: Real>(labels: &[u8], n: usize, k: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    check_labels(labels, n, k, h, w)?;
    let mut data = vec![T::zero(); n * k * h * w];
    for (i, &l) in labels.iter().enumerate() {
        let (b, px) = (i / (h * w), i % (h * w));
        data[(b * k + l as usize) * h * w + px] = T::one();
    }
    Tensor::new(vec![n, k, h, w], data)
}

/// Mean over pixels of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let [n, k, h, w] = nkhw(tape, logits, "cross_entropy")?;
    check_labels(labels, n, k, h, w)?;
    let mut mask = vec![T::zero(); n * h * w * k];
    for (i, &l) in labels.iter().enumerate() {
        mask[i * k + l as usize] = T::one();
    }
    let mask = tape.constant(Tensor::new(vec![n, h, w, k], mask)?)?;
    let y = tape.permute(logits, &[0, 2, 3, 1])?;
    let lp = tape.log_softmax(y)?;
    let picked = tape.mul(lp, mask)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / (n * h * w) as f64)
}

/// Mean squared difference.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape("mse_loss", tape.shape(pred), tape.shape(target)));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Soft macro Dice loss `1 - mean_k (2 sum p g + e) / (sum p + sum g + e)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let [n, k, h, w] = nkhw(tape, pred, "dice_loss")?;
    if tape.shape(target) != [n, k, h, w] {
        return Err(Error::shape("dice_loss", &[n, k, h, w], tape.shape(target)));
    }
    if let Some(bad) = tape.value(pred).data().iter().find(|&&v| v < T::zero()) {
        return Err(Error::invalid(format!("dice_loss: negative probability {bad}")));
    }
    let per_class = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        let y = tape.permute(x, &[1, 0, 2, 3])?;
        let y = tape.reshape(y, &[k, n * h * w])?;
        tape.sum_axis(y, 1)
    };
    let pg = tape.mul(pred, target)?;
    let inter = per_class(tape, pg)?;
    let ps = per_class(tape, pred)?;
    let gs = per_class(tape, target)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let den = tape.add(ps, gs)?;
    let den = tape.add_scalar(den, DICE_SMOOTH)?;
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio)?;
    let neg = tape.scale(m, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// `mean log D(real) + mean log(1 - D(fake))` over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialValue {
    pub value: f64,
    /// Number of inputs that were exactly 0 or 1 and got clamped.
    pub clamped: usize,
}

pub fn adversarial_value(d_real: &[f64], d_fake: &[f64]) -> Result<AdversarialValue> {
    if d_real.is_empty() || d_real.len() != d_fake.len() {
        return Err(Error::shape("adversarial_value", &[d_real.len()], &[d_fake.len()]));
    }
    let mut clamped = 0;
    let mut clamp = |p: f64| -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("discriminator output {p} outside [0, 1]")));
        }
        let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        if c != p {
            clamped += 1;
        }
        Ok(c)
    };
    let mut total = 0.0;
    for (&r, &f) in d_real.iter().zip(d_fake) {
        total += clamp(r)?.ln() + (1.0 - clamp(f)?).ln();
    }
    Ok(AdversarialValue {
        value: total / d_real.len() as f64,
        clamped,
    })
}

/// `-mean log sigma(z)`, the numerically stable form of `-mean log D`.
fn neg_mean_log_sigmoid<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let l = tape.log_sigmoid(z)?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

/// Discriminator loss from pre-sigmoid scores:
/// `-mean log D(real) - mean log(1 - D(fake))`.
pub fn discriminator_loss<T: Real>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let a = neg_mean_log_sigmoid(tape, real_logits)?;
    let neg = tape.scale(fake_logits, -1.0)?;
    let b = neg_mean_log_sigmoid(tape, neg)?;
    tape.add(a, b)
}

/// Non-saturating generator term `-mean log D(fake)`.
pub fn generator_adversarial_loss<T: Real>(tape: &mut Tape<T>, fake_logits: Var) -> Result<Var> {
    neg_mean_log_sigmoid(tape, fake_logits)
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorTerms {
    pub loss: Var,
    pub real_logits: Var,
    pub fake_logits: Var,
}

/// Discriminator objective on a batch. `fake_map` must be detached from the
/// generator; a map that still carries gradient is rejected.
pub fn discriminator_objective<T: Real>(
    tape: &mut Tape<T>,
    disc: &Discriminator,
    d_params: &Bound,
    image: Var,
    real_map: Var,
    fake_map: Var,
) -> Result<DiscriminatorTerms> {
    if tape.requires_grad(fake_map) || tape.requires_grad(image) {
        return Err(Error::GradientLeak(
            "discriminator objective received a generator output that is not detached".into(),
        ));
    }
    let real_in = disc.condition(tape, real_map, image)?;
    let real_logits = disc.logits(tape, d_params, real_in)?;
    let fake_in = disc.condition(tape, fake_map, image)?;
    let fake_logits = disc.logits(tape, d_params, fake_in)?;
    let loss = discriminator_loss(tape, real_logits, fake_logits)?;
    Ok(DiscriminatorTerms {
        loss,
        real_logits,
        fake_logits,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub cross_entropy: Var,
    pub mse: Var,
    pub dice: Var,
    pub adversarial: Option<Var>,
    pub fake_logits: Option<Var>,
    pub total: Var,
}

/// `CE + mu MSE + alpha Dice - lambda mean log D(G(x))`. Without a discriminator the
/// adversarial term is dropped. The discriminator must be bound frozen.
pub fn generator_objective<T: Real>(
    tape: &mut Tape<T>,
    disc: Option<(&Discriminator, &Bound)>,
    image: Var,
    logits: Var,
    labels: &[u8],
    weights: LossWeights,
) -> Result<GeneratorTerms> {
    weights.validate()?;
    if let Some((_, p)) = disc {
        if p.is_trainable() {
            return Err(Error::GradientLeak(
                "generator objective built with a trainable discriminator".into(),
            ));
        }
    }
    let [n, k, h, w] = nkhw(tape, logits, "generator_objective")?;
    let target = tape.constant(one_hot(labels, n, k, h, w)?)?;
    let ce = cross_entropy(tape, logits, labels)?;
    let probs = class_probabilities(tape, logits)?;
    let mse = mse_loss(tape, probs, target)?;
    let dice = dice_loss(tape, probs, target)?;
    let a = tape.scale(mse, weights.mse)?;
    let b = tape.scale(dice, weights.dice)?;
    let mut total = tape.add(ce, a)?;
    total = tape.add(total, b)?;
    let (mut adversarial, mut fake_logits) = (None, None);
    if let Some((d, p)) = disc {
        let input = d.condition(tape, probs, image)?;
        let z = d.logits(tape, p, input)?;
        let adv = generator_adversarial_loss(tape, z)?;
        let weighted = tape.scale(adv, weights.adversarial)?;
        total = tape.add(total, weighted)?;
        adversarial = Some(adv);
        fake_logits = Some(z);
    }
    Ok(GeneratorTerms {
        cross_entropy: ce,
        mse,
        dice,
        adversarial,
        fake_logits,
        total,
    })
}
