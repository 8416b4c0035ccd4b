mod common;

use common::*;
use gatrans_core::slh::{bucket_factors, hash_assign, ProjectionMatrix};
use gatrans_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn projection_rows_are_orthonormal() {
    for (c, d) in [(8, 1), (8, 3), (16, 16), (64, 4)] {
        let m = ProjectionMatrix::new(c, d, 7).unwrap();
        assert!(m.orthonormality_error() < 1e-9);
    }
}

#[test]
fn projection_is_deterministic_per_seed() {
    let a = ProjectionMatrix::new(12, 5, 3).unwrap();
    let b = ProjectionMatrix::new(12, 5, 3).unwrap();
    let c = ProjectionMatrix::new(12, 5, 4).unwrap();
    assert_eq!(a.rows(), b.rows());
    assert_ne!(a.rows(), c.rows());
}

#[test]
fn more_buckets_than_channels_needs_product_hash() {
    assert!(ProjectionMatrix::new(4, 8, 0).is_err());
    let m = ProjectionMatrix::product(4, 8, 0).unwrap();
    assert_eq!(m.factors(), &[4, 2]);
    assert_eq!(m.buckets(), 8);
    assert_eq!(bucket_factors(64, 512).unwrap(), vec![64, 8]);
    assert!(bucket_factors(4, 7).is_err());
}

#[test]
fn single_bucket_holds_every_token() {
    let m = ProjectionMatrix::new(5, 1, 0).unwrap();
    let x = uniform(&[9, 5], &mut rng(0), 1.0);
    let a = hash_assign(&x, &m).unwrap();
    assert_eq!(a.members(), &[(0..9).collect::<Vec<_>>()]);
}

#[test]
fn hashing_is_argmax_of_projection() {
    let m = ProjectionMatrix::new(6, 4, 11).unwrap();
    let x = uniform(&[50, 6], &mut rng(5), 1.0);
    let a = hash_assign(&x, &m).unwrap();
    for i in 0..50 {
        let scores: Vec<f64> = (0..4).map(|r| dot(&m.rows()[r * 6..(r + 1) * 6], x.row(i))).collect();
        let best = (0..4).fold(0, |b, r| if scores[r] > scores[b] { r } else { b });
        assert_eq!(a.bucket_of()[i], best);
    }
}

#[test]
fn collision_rate_rises_with_cosine_similarity() {
    let (c, d, pairs) = (16, 8, 10_000);
    let mut r = rng(42);
    let mut rows: Vec<(f64, bool)> = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let x = unit((0..c).map(|_| r.random_range(-1.0..1.0)).collect());
        let z: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let along = dot(&z, &x);
        let perp = unit(z.iter().zip(&x).map(|(a, b)| a - along * b).collect());
        let theta = r.random_range(0.0..std::f64::consts::PI);
        let y: Vec<f64> = x.iter().zip(&perp).map(|(a, b)| theta.cos() * a + theta.sin() * b).collect();
        let m = ProjectionMatrix::new(c, d, i as u64).unwrap();
        let pair = Tensor::new(vec![2, c], [x, y].concat()).unwrap();
        let a = hash_assign(&pair, &m).unwrap();
        rows.push((theta.cos(), a.bucket_of()[0] == a.bucket_of()[1]));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let deciles: Vec<f64> = rows
        .chunks(pairs / 10)
        .map(|ch| ch.iter().filter(|r| r.1).count() as f64 / ch.len() as f64)
        .collect();
    for w in deciles.windows(2) {
        assert!(w[1] >= w[0], "decile collision rates {deciles:?}");
    }
    assert!(deciles[9] > 0.8 && deciles[0] < 0.05, "{deciles:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_is_exact(n in 1usize..80, c in 1usize..12, d in 1usize..12, seed in 0u64..1000) {
        let d = d.min(c);
        let m = ProjectionMatrix::new(c, d, seed).unwrap();
        let x = uniform(&[n, c], &mut rng(seed), 2.0);
        let a = hash_assign(&x, &m).unwrap();
        a.validate().unwrap();
        let mut seen = vec![0; n];
        for (b, members) in a.members().iter().enumerate() {
            prop_assert!(members.windows(2).all(|w| w[0] < w[1]));
            for &i in members {
                prop_assert_eq!(a.bucket_of()[i], b);
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
        for i in 0..n {
            prop_assert!(a.support(i).contains(&i));
        }
    }

    #[test]
    fn positive_scaling_keeps_buckets(c in 2usize..16, d in 2usize..16, scale in 0.01f64..100.0, seed in 0u64..1000) {
        let d = d.min(c);
        let m = ProjectionMatrix::new(c, d, seed).unwrap();
        let x = uniform(&[20, c], &mut rng(seed + 1), 1.0);
        let scaled = x.map(|v| v * scale);
        let (a, b) = (hash_assign(&x, &m).unwrap(), hash_assign(&scaled, &m).unwrap());
        prop_assert_eq!(a.bucket_of(), b.bucket_of());
    }

    #[test]
    fn product_hash_stays_in_range(c in 1usize..10, d in 1usize..40, seed in 0u64..100) {
        if let Ok(m) = ProjectionMatrix::product(c, d, seed) {
            prop_assert_eq!(m.buckets(), d);
            prop_assert!(m.factors().iter().all(|&f| f <= c));
            let x = uniform(&[30, c], &mut rng(seed), 1.0);
            let a = hash_assign(&x, &m).unwrap();
            prop_assert!(a.bucket_of().iter().all(|&b| b < d));
        }
    }
}
