//! Global learnable attention (GLAM).
//!
//! Each query attends only to the tokens sharing its SLH bucket. The score
//! of a pair is the sum of a learned per-query term (a two-layer MLP on
//! `phi_l(x_i)`) and the dot product `phi_q(x_i) . phi_k(x_j)`; weights are
//! the softmax of the scores over the bucket and the output is the weighted
//! sum of `phi_v(x_j)`.
//!
//! Because the learned term is constant across a query's bucket, it shifts
//! every score of that query equally. It is still evaluated and reported in
//! [`AttentionTrace`] so its contribution is observable.

use std::fmt::Write as _;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};
use crate::slh::{bucket_factors, hash_rows, BucketAssignment, ProjectionMatrix};
use crate::tensor::{gemm, parallel_enabled, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlamConfig {
    /// Token width `c`.
    pub dim: usize,
    /// Hidden width of the adaptive-similarity MLP.
    pub ass_hidden: usize,
    /// Number of hash buckets.
    pub buckets: usize,
    /// Seed of the frozen hashing matrix.
    pub hash_seed: u64,
}

impl GlamConfig {
    /// `(trainable, frozen)` scalar counts.
    pub fn param_count(&self) -> (usize, usize) {
        let (c, h) = (self.dim, self.ass_hidden);
        let projections = 4 * (c * c + c);
        let ass = (c * h + h) + (h + 1);
        let rows = bucket_factors(c, self.buckets).map_or(self.buckets, |f| f.iter().sum());
        (projections + ass, rows * c)
    }
}

/// Parameter handles of one GLAM module.
#[derive(Debug, Clone)]
pub struct Glam {
    pub config: GlamConfig,
    pub phi_q: Linear,
    pub phi_k: Linear,
    pub phi_v: Linear,
    pub phi_l: Linear,
    pub ass_hidden: Linear,
    pub ass_out: Linear,
    pub projection: ParamId,
    /// Bucket counts of the sub-hashes stacked in `projection`.
    pub hash_factors: Vec<usize>,
}

/// How bucketed attention is laid out in memory. Both produce the same
/// numbers; `Padded` packs every bucket into a fixed-capacity block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Variable,
    Padded,
}

impl Glam {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: GlamConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = config.dim;
        if config.ass_hidden == 0 {
            return Err(Error::invalid("ASS hidden width must be positive"));
        }
        let phi_q = Linear::new(store, &format!("{name}.phi_q"), c, c, rng);
        let phi_k = Linear::new(store, &format!("{name}.phi_k"), c, c, rng);
        let phi_v = Linear::new(store, &format!("{name}.phi_v"), c, c, rng);
        let phi_l = Linear::new(store, &format!("{name}.phi_l"), c, c, rng);
        let ass_hidden = Linear::new(store, &format!("{name}.ass_w1"), c, config.ass_hidden, rng);
        let ass_out = Linear::new(store, &format!("{name}.ass_w2"), config.ass_hidden, 1, rng);
        let m = ProjectionMatrix::product(c, config.buckets, config.hash_seed)?;
        let projection = store.add(format!("{name}.projection"), m.to_tensor(), false);
        Ok(Self {
            config,
            phi_q,
            phi_k,
            phi_v,
            phi_l,
            ass_hidden,
            ass_out,
            projection,
            hash_factors: m.factors().to_vec(),
        })
    }

    /// Buckets every sample of `x: [N, n, c]` by value.
    pub fn assign<T: Real>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Vec<BucketAssignment>> {
        let s = tape.shape(x);
        if s.len() != 3 || s[2] != self.config.dim {
            return Err(Error::shape("glam", s, &[self.config.dim]));
        }
        let (n, c) = (s[1], s[2]);
        let m = tape.value(p[self.projection]);
        tape.value(x)
            .data()
            .chunks(n * c)
            .map(|sample| hash_rows(sample, n, m, &self.hash_factors))
            .collect()
    }

    /// Per-query adaptive score `W2 relu(W1 phi_l(x) + b1) + b2`, `[.., 1]`.
    pub fn ass_scores<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let l = self.phi_l.forward(tape, p, x)?;
        let h = self.ass_hidden.forward(tape, p, l)?;
        let h = tape.relu(h)?;
        self.ass_out.forward(tape, p, h)
    }

    /// `x: [N, n, c] -> [N, n, c]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let buckets = self.assign(tape, p, x)?;
        self.forward_with(tape, p, x, Arc::new(buckets))
    }

    /// Forward pass with an externally supplied bucket assignment.
    pub fn forward_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        buckets: Arc<Vec<BucketAssignment>>,
    ) -> Result<Var> {
        let q = self.phi_q.forward(tape, p, x)?;
        let k = self.phi_k.forward(tape, p, x)?;
        let v = self.phi_v.forward(tape, p, x)?;
        let a = self.ass_scores(tape, p, x)?;
        tape.bucket_attention(q, k, v, a, buckets)
    }
}

/// Projected tokens of a `[n, c]` input, evaluated without a tape.
struct Projected<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    ass: Vec<T>,
}

fn apply_linear<T: Real>(store: &ParamStore<T>, lin: &Linear, x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = x.matmul(store.get(lin.weight))?;
    let b = store.get(lin.bias).data();
    let cols = b.len();
    let mut data = y.into_vec();
    for row in data.chunks_mut(cols) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    Tensor::new(vec![x.shape()[0], cols], data)
}

fn project<T: Real>(store: &ParamStore<T>, glam: &Glam, x: &Tensor<T>) -> Result<Projected<T>> {
    if x.ndim() != 2 || x.shape()[1] != glam.config.dim {
        return Err(Error::shape("glam", x.shape(), &[glam.config.dim]));
    }
    let l = apply_linear(store, &glam.phi_l, x)?;
    let h = apply_linear(store, &glam.ass_hidden, &l)?.map(|v| v.max(T::zero()));
    Ok(Projected {
        q: apply_linear(store, &glam.phi_q, x)?.into_vec(),
        k: apply_linear(store, &glam.phi_k, x)?.into_vec(),
        v: apply_linear(store, &glam.phi_v, x)?.into_vec(),
        ass: apply_linear(store, &glam.ass_out, &h)?.into_vec(),
    })
}

/// Bucketed attention of a single `[n, c]` token matrix.
pub fn glam_forward<T: Real>(store: &ParamStore<T>, glam: &Glam, x: &Tensor<T>) -> Result<Tensor<T>> {
    glam_forward_exec(store, glam, x, Execution::Variable)
}

pub fn glam_forward_exec<T: Real>(
    store: &ParamStore<T>,
    glam: &Glam,
    x: &Tensor<T>,
    exec: Execution,
) -> Result<Tensor<T>> {
    let pr = project(store, glam, x)?;
    let assignment = hash_rows(x.data(), x.shape()[0], store.get(glam.projection), &glam.hash_factors)?;
    let c = glam.config.dim;
    let out = match exec {
        Execution::Variable => bucket_attention_forward(&pr.q, &pr.k, &pr.v, &pr.ass, c, &assignment)?,
        Execution::Padded => padded_attention_forward(&pr.q, &pr.k, &pr.v, &pr.ass, c, &assignment)?,
    };
    Tensor::new(x.shape().to_vec(), out)
}

/// Quadratic all-pairs attention with the same similarity function; the
/// verification oracle for [`glam_forward`] with a single bucket.
pub fn dense_attention_reference<T: Real>(store: &ParamStore<T>, glam: &Glam, x: &Tensor<T>) -> Result<Tensor<T>> {
    const QUERY_BLOCK: usize = 256;
    let pr = project(store, glam, x)?;
    let (n, c) = (x.shape()[0], glam.config.dim);
    let mut out = vec![T::zero(); n * c];
    let mut scores = vec![T::zero(); QUERY_BLOCK.min(n) * n];
    for start in (0..n).step_by(QUERY_BLOCK) {
        let rows = QUERY_BLOCK.min(n - start);
        let s = &mut scores[..rows * n];
        gemm(false, true, rows, c, n, &pr.q[start * c..(start + rows) * c], &pr.k, s, false);
        for (r, row) in s.chunks_mut(n).enumerate() {
            let a = pr.ass[start + r];
            row.iter_mut().for_each(|v| *v += a);
            softmax_in_place(row);
        }
        gemm(false, false, rows, n, c, s, &pr.v, &mut out[start * c..(start + rows) * c], false);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "dense_attention_reference".into(),
        });
    }
    Tensor::new(vec![n, c], out)
}

/// Dot-product similarity `phi_q(x_i) . phi_k(x_j)` on a tape; inputs are
/// `[1, c]`, output `[1, 1]`.
pub fn s_mass<T: Real>(tape: &mut Tape<T>, p: &Bound, glam: &Glam, xi: Var, xj: Var) -> Result<Var> {
    let q = glam.phi_q.forward(tape, p, xi)?;
    let k = glam.phi_k.forward(tape, p, xj)?;
    let kt = tape.transpose(k)?;
    tape.matmul(q, kt)
}

/// Adaptive similarity of query `xi: [1, c]` against a bucket of `members`
/// keys: one score per member, `[members, 1]`.
pub fn s_ass<T: Real>(tape: &mut Tape<T>, p: &Bound, glam: &Glam, xi: Var, members: usize) -> Result<Var> {
    if members == 0 {
        return Err(Error::invalid("s_ass: empty bucket"));
    }
    let a = glam.ass_scores(tape, p, xi)?;
    let ones = tape.constant(Tensor::ones(&[members, 1]))?;
    tape.matmul(ones, a)
}

fn map_buckets<R: Send>(a: &BucketAssignment, f: impl Fn(usize, &[usize]) -> R + Sync + Send) -> Vec<R> {
    let members = a.members();
    if parallel_enabled() {
        use rayon::prelude::*;
        members.par_iter().enumerate().map(|(b, m)| f(b, m)).collect()
    } else {
        members.iter().enumerate().map(|(b, m)| f(b, m)).collect()
    }
}

fn gather<T: Real>(src: &[T], idx: &[usize], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        out.extend_from_slice(&src[i * c..(i + 1) * c]);
    }
    out
}

fn scatter<T: Real>(dst: &mut [T], block: &[T], idx: &[usize], c: usize) {
    for (pos, &i) in idx.iter().enumerate() {
        dst[i * c..(i + 1) * c].copy_from_slice(&block[pos * c..(pos + 1) * c]);
    }
}

/// Row-softmax of `Q Kᵀ + ass` for one bucket, `[m, m]`.
fn bucket_weights<T: Real>(qb: &[T], kb: &[T], ass: &[T], idx: &[usize], c: usize) -> Vec<T> {
    let m = idx.len();
    let mut p = vec![T::zero(); m * m];
    gemm(false, true, m, c, m, qb, kb, &mut p, false);
    for (row, &i) in p.chunks_mut(m).zip(idx) {
        let a = ass[i];
        row.iter_mut().for_each(|v| *v += a);
        softmax_in_place(row);
    }
    p
}

pub(crate) fn bucket_attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    ass: &[T],
    c: usize,
    a: &BucketAssignment,
) -> Result<Vec<T>> {
    let blocks = map_buckets(a, |b, idx| {
        if idx.is_empty() {
            return Ok(Vec::new());
        }
        let m = idx.len();
        let p = bucket_weights(&gather(q, idx, c), &gather(k, idx, c), ass, idx, c);
        if p.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("glam scores (bucket {b})"),
            });
        }
        let mut ob = vec![T::zero(); m * c];
        gemm(false, false, m, m, c, &p, &gather(v, idx, c), &mut ob, false);
        Ok(ob)
    });
    let mut out = vec![T::zero(); a.len() * c];
    for (block, idx) in blocks.into_iter().zip(a.members()) {
        scatter(&mut out, &block?, idx, c);
    }
    Ok(out)
}

pub(crate) struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dass: Vec<T>,
}

/// Vector-Jacobian product of [`bucket_attention_forward`]; weights are
/// recomputed per bucket rather than stored.
pub(crate) fn bucket_attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    ass: &[T],
    g: &[T],
    c: usize,
    a: &BucketAssignment,
) -> AttentionGrads<T> {
    let blocks = map_buckets(a, |_, idx| {
        let m = idx.len();
        if m == 0 {
            return None;
        }
        let (qb, kb, vb, gb) = (gather(q, idx, c), gather(k, idx, c), gather(v, idx, c), gather(g, idx, c));
        let p = bucket_weights(&qb, &kb, ass, idx, c);
        let mut dv = vec![T::zero(); m * c];
        gemm(true, false, m, m, c, &p, &gb, &mut dv, false);
        let mut ds = vec![T::zero(); m * m];
        gemm(false, true, m, c, m, &gb, &vb, &mut ds, false);
        let mut dass = vec![T::zero(); m];
        for ((row, prow), da) in ds.chunks_mut(m).zip(p.chunks(m)).zip(dass.iter_mut()) {
            let dot: T = row.iter().zip(prow).map(|(&d, &w)| d * w).sum();
            let mut total = T::zero();
            for (d, &w) in row.iter_mut().zip(prow) {
                *d = w * (*d - dot);
                total += *d;
            }
            *da = total;
        }
        let mut dq = vec![T::zero(); m * c];
        gemm(false, false, m, m, c, &ds, &kb, &mut dq, false);
        let mut dk = vec![T::zero(); m * c];
        gemm(true, false, m, m, c, &ds, &qb, &mut dk, false);
        Some((dq, dk, dv, dass))
    });
    let n = a.len();
    let mut grads = AttentionGrads {
        dq: vec![T::zero(); n * c],
        dk: vec![T::zero(); n * c],
        dv: vec![T::zero(); n * c],
        dass: vec![T::zero(); n],
    };
    for (block, idx) in blocks.into_iter().zip(a.members()) {
        let Some((dq, dk, dv, dass)) = block else { continue };
        scatter(&mut grads.dq, &dq, idx, c);
        scatter(&mut grads.dk, &dk, idx, c);
        scatter(&mut grads.dv, &dv, idx, c);
        scatter(&mut grads.dass, &dass, idx, 1);
    }
    grads
}

/// Fixed-capacity layout: every non-empty bucket is packed into a
/// `[capacity, c]` block (capacity = largest occupancy) and padding keys are
/// masked out of the softmax.
pub(crate) fn padded_attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    ass: &[T],
    c: usize,
    a: &BucketAssignment,
) -> Result<Vec<T>> {
    let cap = a.max_occupancy();
    let live: Vec<&Vec<usize>> = a.members().iter().filter(|m| !m.is_empty()).collect();
    let pack = |src: &[T]| {
        let mut out = vec![T::zero(); live.len() * cap * c];
        for (blk, idx) in out.chunks_mut(cap * c).zip(&live) {
            for (pos, &i) in idx.iter().enumerate() {
                blk[pos * c..(pos + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        out
    };
    let (qp, kp, vp) = (pack(q), pack(k), pack(v));
    let mut out = vec![T::zero(); a.len() * c];
    let mut scores = vec![T::zero(); cap * cap];
    let mut ob = vec![T::zero(); cap * c];
    for (b, idx) in live.iter().enumerate() {
        let span = b * cap * c..(b + 1) * cap * c;
        gemm(false, true, cap, c, cap, &qp[span.clone()], &kp[span.clone()], &mut scores, false);
        for (r, row) in scores.chunks_mut(cap).enumerate() {
            if r >= idx.len() {
                row.fill(T::zero());
                continue;
            }
            let shift = ass[idx[r]];
            for (j, s) in row.iter_mut().enumerate() {
                *s = if j < idx.len() { *s + shift } else { T::neg_infinity() };
            }
            softmax_in_place(row);
        }
        if scores.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("glam scores (padded block {b})"),
            });
        }
        gemm(false, false, cap, cap, c, &scores, &vp[span], &mut ob, false);
        scatter(&mut out, &ob[..idx.len() * c], idx, c);
    }
    Ok(out)
}

/// Diagnostic record of one query's attention.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub query: usize,
    pub bucket: usize,
    /// Adaptive score added to every pair of this query.
    pub ass: f64,
    pub keys: Vec<usize>,
    pub mass: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTrace {
    pub queries: Vec<QueryTrace>,
}

impl AttentionTrace {
    /// One line per query:
    /// `query=<i> bucket=<b> ass=<s> keys=<j,..> mass=<s,..> weights=<w,..>`.
    pub fn to_text(&self) -> String {
        fn join<V: std::fmt::Display>(xs: &[V]) -> String {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        }
        let mut s = String::new();
        for q in &self.queries {
            let _ = writeln!(
                s,
                "query={} bucket={} ass={} keys={} mass={} weights={}",
                q.query,
                q.bucket,
                q.ass,
                join(&q.keys),
                join(&q.mass),
                join(&q.weights)
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        fn list<V: std::str::FromStr>(s: &str) -> Result<Vec<V>> {
            s.split(',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| Error::invalid(format!("trace: bad value {t}"))))
                .collect()
        }
        let mut queries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut fields = std::collections::HashMap::new();
            for part in line.split_whitespace() {
                let (key, value) = part
                    .split_once('=')
                    .ok_or_else(|| Error::invalid(format!("trace: malformed field {part}")))?;
                fields.insert(key, value);
            }
            let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::invalid(format!("trace: missing {k}")));
            let scalar = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::invalid(format!("trace: bad {k}"))) };
            queries.push(QueryTrace {
                query: scalar("query")? as usize,
                bucket: scalar("bucket")? as usize,
                ass: scalar("ass")?,
                keys: list(get("keys")?)?,
                mass: list(get("mass")?)?,
                weights: list(get("weights")?)?,
            });
        }
        Ok(Self { queries })
    }
}

/// Recomputes the attention of `x: [n, c]` keeping every intermediate score.
pub fn attention_trace<T: Real>(store: &ParamStore<T>, glam: &Glam, x: &Tensor<T>) -> Result<AttentionTrace> {
    let pr = project(store, glam, x)?;
    let c = glam.config.dim;
    let a = hash_rows(x.data(), x.shape()[0], store.get(glam.projection), &glam.hash_factors)?;
    let mut queries = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let keys = a.support(i).to_vec();
        let qi = &pr.q[i * c..(i + 1) * c];
        let mass: Vec<f64> = keys
            .iter()
            .map(|&j| qi.iter().zip(&pr.k[j * c..(j + 1) * c]).map(|(&x, &y)| x * y).sum::<T>().as_f64())
            .collect();
        let ass = pr.ass[i].as_f64();
        let mut weights: Vec<f64> = mass.iter().map(|m| m + ass).collect();
        softmax_in_place(&mut weights);
        queries.push(QueryTrace {
            query: i,
            bucket: a.bucket_of()[i],
            ass,
            keys,
            mass,
            weights,
        });
    }
    Ok(AttentionTrace { queries })
}
