#![allow(dead_code)]

use gatrans_core::glam::{Glam, GlamConfig};
use gatrans_core::nn::{Linear, ParamStore};
use gatrans_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// A GLAM module with random weights and random (non-zero) biases.
pub fn random_glam(c: usize, hidden: usize, buckets: usize, seed: u64) -> (Glam, ParamStore<f64>) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let cfg = GlamConfig {
        dim: c,
        ass_hidden: hidden,
        buckets,
        hash_seed: seed ^ 0xabc,
    };
    let glam = Glam::new(&mut store, "g", cfg, &mut r).unwrap();
    for lin in [&glam.phi_q, &glam.phi_k, &glam.phi_v, &glam.phi_l, &glam.ass_hidden, &glam.ass_out] {
        let shape = store.get(lin.bias).shape().to_vec();
        store.set(lin.bias, uniform(&shape, &mut r, 0.3)).unwrap();
    }
    (glam, store)
}

/// `x W + b` for one row, by explicit loops.
pub fn linear_row(store: &ParamStore<f64>, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(lin.weight);
    let b = store.get(lin.bias).data();
    (0..lin.out_dim)
        .map(|o| b[o] + (0..lin.in_dim).map(|i| x[i] * w.get(&[i, o])).sum::<f64>())
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adaptive score of one query by explicit loops.
pub fn ass_oracle(store: &ParamStore<f64>, g: &Glam, x: &[f64]) -> f64 {
    let l = linear_row(store, &g.phi_l, x);
    let h: Vec<f64> = linear_row(store, &g.ass_hidden, &l).into_iter().map(|v| v.max(0.0)).collect();
    linear_row(store, &g.ass_out, &h)[0]
}

/// Bucket of one token: argmax per sub-hash, combined mixed-radix.
pub fn bucket_oracle(store: &ParamStore<f64>, g: &Glam, x: &[f64]) -> usize {
    let m = store.get(g.projection);
    let c = x.len();
    let mut id = 0;
    let mut start = 0;
    for &f in &g.hash_factors {
        let mut best = (0, f64::NEG_INFINITY);
        for r in 0..f {
            let v: f64 = (0..c).map(|k| m.get(&[start + r, k]) * x[k]).sum();
            if v > best.1 {
                best = (r, v);
            }
        }
        id = id * f + best.0;
        start += f;
    }
    id
}

/// Output of bucketed attention computed pair by pair: for each query, every
/// token in its bucket is scored, the scores are normalized by exp / sum, and
/// the value projections are averaged with those weights.
pub fn pairwise_oracle(store: &ParamStore<f64>, g: &Glam, x: &Tensor<f64>) -> Vec<f64> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let rows: Vec<&[f64]> = (0..n).map(|i| x.row(i)).collect();
    let bucket: Vec<usize> = rows.iter().map(|r| bucket_oracle(store, g, r)).collect();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let q = linear_row(store, &g.phi_q, rows[i]);
        let a = ass_oracle(store, g, rows[i]);
        let support: Vec<usize> = (0..n).filter(|&j| bucket[j] == bucket[i]).collect();
        let scores: Vec<f64> = support
            .iter()
            .map(|&j| a + dot(&q, &linear_row(store, &g.phi_k, rows[j])))
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
        for (&j, s) in support.iter().zip(&scores) {
            let w = (s - top).exp() / z;
            let v = linear_row(store, &g.phi_v, rows[j]);
            for k in 0..c {
                out[i * c + k] += w * v[k];
            }
        }
    }
    out
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
