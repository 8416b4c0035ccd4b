//! Super-bit locality-sensitive hashing.
//!
//! Tokens are projected onto a fixed matrix with orthonormal rows and each
//! token lands in the bucket of its largest projected coordinate. Tokens
//! sharing a bucket form the attention support of one another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Frozen hashing matrix.
///
/// With `buckets <= dim` it has `buckets` orthonormal rows and a token's
/// bucket is its largest projected coordinate. Wider hashes (see
/// [`ProjectionMatrix::product`]) combine several such sub-hashes, each of at
/// most `dim` buckets, and a token's bucket is the tuple of sub-hash buckets
/// read as a mixed-radix number. Rows are stored sub-hash after sub-hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    rows: Vec<f64>,
    factors: Vec<usize>,
    dim: usize,
    seed: u64,
}

/// Splits `buckets` into factors no larger than `dim`, largest first.
pub fn bucket_factors(dim: usize, buckets: usize) -> Result<Vec<usize>> {
    if buckets == 0 || dim == 0 {
        return Err(Error::invalid("projection needs at least one bucket and one dimension"));
    }
    let mut factors = Vec::new();
    let mut rest = buckets;
    while rest > dim {
        let f = (2..=dim).rev().find(|f| rest % f == 0).ok_or_else(|| {
            Error::invalid(format!(
                "{buckets} buckets cannot be split into sub-hashes of at most {dim} buckets"
            ))
        })?;
        factors.push(f);
        rest /= f;
    }
    if rest > 1 || factors.is_empty() {
        factors.push(rest);
    }
    Ok(factors)
}

impl ProjectionMatrix {
    /// Orthonormal rows via Gram-Schmidt QR of a seeded Gaussian matrix.
    pub fn new(dim: usize, buckets: usize, seed: u64) -> Result<Self> {
        if buckets == 0 || dim == 0 {
            return Err(Error::invalid("projection needs at least one bucket and one dimension"));
        }
        if buckets > dim {
            return Err(Error::invalid(format!(
                "cannot build {buckets} orthonormal rows in dimension {dim}; \
                 at most {dim} mutually orthogonal directions exist"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            rows: orthonormal_block(&mut rng, dim, buckets),
            factors: vec![buckets],
            dim,
            seed,
        })
    }

    /// Product hash for more buckets than dimensions: one independently drawn
    /// orthonormal sub-hash per factor of [`bucket_factors`]. Identical to
    /// [`ProjectionMatrix::new`] when `buckets <= dim`.
    pub fn product(dim: usize, buckets: usize, seed: u64) -> Result<Self> {
        if buckets <= dim {
            return Self::new(dim, buckets, seed);
        }
        let factors = bucket_factors(dim, buckets)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = factors.iter().flat_map(|&f| orthonormal_block(&mut rng, dim, f)).collect();
        Ok(Self {
            rows,
            factors,
            dim,
            seed,
        })
    }

    /// Uses the given rows verbatim as a single sub-hash (e.g. identity for
    /// tests).
    pub fn from_rows(buckets: usize, dim: usize, rows: Vec<f64>, seed: u64) -> Result<Self> {
        if rows.len() != buckets * dim || buckets == 0 {
            return Err(Error::shape("projection", &[buckets, dim], &[rows.len()]));
        }
        Ok(Self {
            rows,
            factors: vec![buckets],
            dim,
            seed,
        })
    }

    pub fn buckets(&self) -> usize {
        self.factors.iter().product()
    }

    /// Bucket counts of the sub-hashes.
    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    /// All rows, `[sum of factors, dim]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![self.rows.len() / self.dim, self.dim],
            self.rows.iter().map(|&v| T::lit(v)).collect(),
        )
    }

    /// Largest deviation of `M Mᵀ` from the identity, within each sub-hash.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        let mut start = 0;
        for &f in &self.factors {
            for i in start..start + f {
                for j in start..start + f {
                    let dot: f64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b).sum();
                    let target = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((dot - target).abs());
                }
            }
            start += f;
        }
        worst
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// `count` orthonormal vectors in R^dim via modified Gram-Schmidt with one
/// re-orthogonalization pass.
fn orthonormal_block(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(r) {
                    *a -= dot * b;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        // A draw (numerically) inside the span of earlier rows is discarded.
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    rows.into_iter().flatten().collect()
}

/// Token-to-bucket map and the induced partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketAssignment {
    bucket_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl BucketAssignment {
    /// Builds the partition from per-token bucket ids.
    pub fn from_buckets(bucket_of: Vec<usize>, buckets: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); buckets];
        for (i, &b) in bucket_of.iter().enumerate() {
            members
                .get_mut(b)
                .ok_or_else(|| Error::invalid(format!("token {i} assigned to bucket {b} of {buckets}")))?
                .push(i);
        }
        Ok(Self { bucket_of, members })
    }

    pub fn single_bucket(n: usize) -> Self {
        Self {
            bucket_of: vec![0; n],
            members: vec![(0..n).collect()],
        }
    }

    pub fn len(&self) -> usize {
        self.bucket_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bucket_of.is_empty()
    }

    pub fn buckets(&self) -> usize {
        self.members.len()
    }

    pub fn bucket_of(&self) -> &[usize] {
        &self.bucket_of
    }

    pub fn members(&self) -> &[Vec<usize>] {
        &self.members
    }

    /// Tokens sharing token `i`'s bucket, ascending.
    pub fn support(&self, i: usize) -> &[usize] {
        &self.members[self.bucket_of[i]]
    }

    /// Size of the largest bucket.
    pub fn max_occupancy(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Checks that `members` is an exact partition consistent with `bucket_of`.
    pub fn validate(&self) -> Result<()> {
        let n = self.bucket_of.len();
        let mut seen = vec![false; n];
        for (b, m) in self.members.iter().enumerate() {
            for w in m.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::invalid(format!("bucket {b} members not strictly ascending")));
                }
            }
            for &i in m {
                if i >= n || seen[i] || self.bucket_of[i] != b {
                    return Err(Error::invalid(format!("bucket {b} inconsistent at token {i}")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("bucket partition does not cover every token"));
        }
        Ok(())
    }
}

/// Hashes every row of `x: [n, c]` with one matrix product and a row-wise
/// argmax per sub-hash (ties to the lowest index).
pub fn hash_assign<T: Real>(x: &Tensor<T>, m: &ProjectionMatrix) -> Result<BucketAssignment> {
    if x.ndim() != 2 || x.shape()[1] != m.dim() {
        return Err(Error::shape("hash_assign", x.shape(), &[m.buckets(), m.dim()]));
    }
    hash_rows(x.data(), x.shape()[0], &m.to_tensor::<T>(), m.factors())
}

/// Same as [`hash_assign`] for a raw `[n, c]` row block and the stacked
/// sub-hash rows already converted to `T`.
pub(crate) fn hash_rows<T: Real>(x: &[T], n: usize, m: &Tensor<T>, factors: &[usize]) -> Result<BucketAssignment> {
    let (d, c) = (m.shape()[0], m.shape()[1]);
    if factors.iter().sum::<usize>() != d {
        return Err(Error::shape("hash_rows", m.shape(), factors));
    }
    let mut proj = vec![T::zero(); n * d];
    gemm(false, true, n, c, d, x, m.data(), &mut proj, false);
    let bucket_of = proj
        .chunks(d)
        .map(|row| {
            let mut id = 0;
            let mut start = 0;
            for &f in factors {
                let sub = &row[start..start + f];
                let mut best = 0;
                for (j, &v) in sub.iter().enumerate().skip(1) {
                    if v > sub[best] {
                        best = j;
                    }
                }
                id = id * f + best;
                start += f;
            }
            id
        })
        .collect();
    BucketAssignment::from_buckets(bucket_of, factors.iter().product())
}

/// Per-bucket dense row blocks of a `[n, c]` matrix.
#[derive(Debug, Clone)]
pub struct BucketBlocks<T> {
    /// `blocks[b]` holds the rows of bucket `b` in member order; empty
    /// buckets yield empty blocks.
    pub blocks: Vec<Vec<T>>,
    pub width: usize,
    /// `inverse[i] = (bucket, position)` of token `i`.
    pub inverse: Vec<(usize, usize)>,
}

pub fn gather_buckets<T: Real>(x: &Tensor<T>, a: &BucketAssignment) -> Result<BucketBlocks<T>> {
    if x.ndim() != 2 || x.shape()[0] != a.len() {
        return Err(Error::shape("gather_buckets", x.shape(), &[a.len()]));
    }
    a.validate()?;
    let c = x.shape()[1];
    let mut inverse = vec![(0, 0); a.len()];
    let blocks = a
        .members()
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let mut block = Vec::with_capacity(m.len() * c);
            for (pos, &i) in m.iter().enumerate() {
                block.extend_from_slice(x.row(i));
                inverse[i] = (b, pos);
            }
            block
        })
        .collect();
    Ok(BucketBlocks {
        blocks,
        width: c,
        inverse,
    })
}

/// Inverse of [`gather_buckets`].
pub fn scatter_buckets<T: Real>(blocks: &BucketBlocks<T>) -> Result<Tensor<T>> {
    let (n, c) = (blocks.inverse.len(), blocks.width);
    let mut out = Vec::with_capacity(n * c);
    for &(b, pos) in &blocks.inverse {
        let block = blocks
            .blocks
            .get(b)
            .filter(|blk| (pos + 1) * c <= blk.len())
            .ok_or_else(|| Error::invalid(format!("scatter: missing row {pos} of bucket {b}")))?;
        out.extend_from_slice(&block[pos * c..(pos + 1) * c]);
    }
    Tensor::new(vec![n, c], out)
}
