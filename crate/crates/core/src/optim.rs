//! Adam with L2 weight decay added to the gradient.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state for one [`ParamStore`]. Frozen entries are skipped.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = |e: &crate::nn::ParamEntry<T>| if e.trainable { vec![T::zero(); e.value.len()] } else { Vec::new() };
        Ok(Self {
            config,
            steps: 0,
            first: store.entries().iter().map(zeros).collect(),
            second: store.entries().iter().map(zeros).collect(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from gradients indexed like the store's entries
    /// (`None` means zero gradient).
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::shape("Adam::step", &[grads.len()], &[store.len()]));
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (wd, eps) = (T::lit(c.weight_decay), T::lit(c.eps));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if !store.entries()[i].trainable {
                continue;
            }
            let w = store.get(id);
            let g = grads[i].as_ref();
            if let Some(g) = g {
                if g.shape() != w.shape() {
                    return Err(Error::shape("Adam::step", g.shape(), w.shape()));
                }
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let mut out = w.data().to_vec();
            for (j, wj) in out.iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]) + wd * *wj;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                *wj -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
            store.set(id, Tensor::new(w.shape().to_vec(), out)?)?;
        }
        Ok(())
    }
}

/// Gradients of every bound tensor after `tape.backward`.
pub fn collect_grads<T: Real>(tape: &Tape<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
    bound.vars().iter().map(|&v| tape.grad_opt(v).cloned()).collect()
}
