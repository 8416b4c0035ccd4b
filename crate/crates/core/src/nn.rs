//! Parameter storage and the basic layers built on the tape.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen buffers (the hashing matrices) are stored alongside weights so
    /// checkpoints capture them, but never receive gradients.
    pub trainable: bool,
}

/// Named, ordered collection of one network's tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", entry.value.shape(), value.shape()));
        }
        entry.value = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        self.set(id, value)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Places every tensor on the tape. With `trainable == false` the whole
    /// network is frozen: no node derived from it receives a gradient.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .entries
            .iter()
            .map(|e| tape.input(e.value.clone(), trainable && e.trainable))
            .collect::<Result<_>>()?;
        Ok(Bound { vars, trainable })
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// A [`ParamStore`] placed on a tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform Kaiming initialization with the `a = sqrt(5)` leaky slope, i.e.
/// bound `1/sqrt(fan_in)`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming_uniform(&[in_dim, out_dim], in_dim, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], Some(p[self.bias]))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true);
        Self {
            weight,
            bias,
            spec: Conv2dSpec { stride, pad },
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], Some(p[self.bias]), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[in_ch, out_ch, kernel, kernel], fan_in, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]), true);
        Self {
            weight,
            bias,
            spec: Conv2dSpec { stride, pad: 0 },
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p[self.weight], Some(p[self.bias]), self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

/// `[N,C,H,W] -> [N,H*W,C]`.
pub fn to_tokens<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let y = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(y, &[s[0], s[2] * s[3], s[1]])
}

/// `[N,H*W,C] -> [N,C,H,W]`.
pub fn to_spatial<T: Real>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape("to_spatial", &s, &[h, w]));
    }
    let y = tape.reshape(x, &[s[0], h, w, s[2]])?;
    tape.permute(y, &[0, 3, 1, 2])
}
