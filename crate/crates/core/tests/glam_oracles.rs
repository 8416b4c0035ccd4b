mod common;

use common::*;
use gatrans_core::autodiff::Tape;
use gatrans_core::glam::{
    attention_trace, dense_attention_reference, glam_forward, glam_forward_exec, s_ass, s_mass, AttentionTrace, Execution,
};
use gatrans_core::Tensor;
use rand::Rng;

fn set_identity(store: &mut gatrans_core::nn::ParamStore<f64>, lin: &gatrans_core::nn::Linear) {
    let n = lin.in_dim;
    store.set(lin.weight, Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })).unwrap();
    store.set(lin.bias, Tensor::zeros(&[n])).unwrap();
}

fn eval_mass(store: &gatrans_core::nn::ParamStore<f64>, g: &gatrans_core::glam::Glam, xi: &[f64], xj: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false).unwrap();
    let c = xi.len();
    let a = tape.constant(Tensor::new(vec![1, c], xi.to_vec()).unwrap()).unwrap();
    let b = tape.constant(Tensor::new(vec![1, c], xj.to_vec()).unwrap()).unwrap();
    let s = s_mass(&mut tape, &p, g, a, b).unwrap();
    tape.value(s).item()
}

#[test]
fn mass_of_identity_projections() {
    let (g, mut store) = random_glam(2, 2, 1, 0);
    set_identity(&mut store, &g.phi_q);
    set_identity(&mut store, &g.phi_k);
    assert_eq!(eval_mass(&store, &g, &[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert_eq!(eval_mass(&store, &g, &[1.0, 2.0], &[1.0, 2.0]), 5.0);
}

#[test]
fn mass_matches_projection_dot_product() {
    let mut r = rng(4);
    for seed in 0..10 {
        let (g, store) = random_glam(6, 5, 2, seed);
        let xi: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let xj: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        let want = dot(&linear_row(&store, &g.phi_q, &xi), &linear_row(&store, &g.phi_k, &xj));
        assert!((eval_mass(&store, &g, &xi, &xj) - want).abs() < 1e-6);
    }
}

fn eval_ass(store: &gatrans_core::nn::ParamStore<f64>, g: &gatrans_core::glam::Glam, xi: &[f64], members: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false).unwrap();
    let a = tape.constant(Tensor::new(vec![1, xi.len()], xi.to_vec()).unwrap()).unwrap();
    let s = s_ass(&mut tape, &p, g, a, members).unwrap();
    tape.value(s).data().to_vec()
}

#[test]
fn constant_ass_head_gives_its_bias() {
    let (g, mut store) = random_glam(4, 3, 1, 1);
    store.set(g.ass_hidden.weight, Tensor::zeros(&[4, 3])).unwrap();
    store.set(g.ass_hidden.bias, Tensor::zeros(&[3])).unwrap();
    store.set(g.ass_out.bias, Tensor::new(vec![1], vec![0.75]).unwrap()).unwrap();
    assert_eq!(eval_ass(&store, &g, &[0.3, -2.0, 1.0, 0.5], 3), vec![0.75; 3]);
}

#[test]
fn ass_matches_two_layer_mlp() {
    let mut r = rng(2);
    for seed in 0..10 {
        let (g, store) = random_glam(5, 7, 1, seed);
        let xi: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let want = ass_oracle(&store, &g, &xi);
        for v in eval_ass(&store, &g, &xi, 4) {
            assert!((v - want).abs() < 1e-6);
        }
    }
}

#[test]
fn ass_rejects_empty_bucket() {
    let (g, store) = random_glam(3, 3, 1, 0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false).unwrap();
    let a = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
    assert!(s_ass(&mut tape, &p, &g, a, 0).is_err());
}

#[test]
fn zeroed_ass_output_reduces_to_dot_product_attention() {
    let (g, mut store) = random_glam(4, 4, 2, 3);
    store.set(g.ass_out.weight, Tensor::zeros(&[4, 1])).unwrap();
    store.set(g.ass_out.bias, Tensor::zeros(&[1])).unwrap();
    let x = uniform(&[12, 4], &mut rng(8), 1.0);
    let got = glam_forward(&store, &g, &x).unwrap();
    assert!(max_diff(got.data(), &pairwise_oracle(&store, &g, &x)) < 1e-9);
}

#[test]
fn single_bucket_matches_dense_reference() {
    let mut r = rng(10);
    for seed in 0..10 {
        let (n, c) = (r.random_range(1..=64), r.random_range(1..=32));
        let (g, store) = random_glam(c, c, 1, seed);
        let x = uniform(&[n, c], &mut r, 1.0);
        let a = glam_forward(&store, &g, &x).unwrap();
        let b = dense_attention_reference(&store, &g, &x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6, "n={n} c={c}");
    }
}

#[test]
fn dense_reference_of_one_token_is_its_value_projection() {
    let (g, store) = random_glam(5, 5, 1, 0);
    let x = uniform(&[1, 5], &mut rng(1), 1.0);
    let out = dense_attention_reference(&store, &g, &x).unwrap();
    let want = linear_row(&store, &g.phi_v, x.row(0));
    assert!(max_diff(out.data(), &want) < 1e-12);
}

#[test]
fn identical_tokens_return_their_value_projection() {
    let (g, store) = random_glam(4, 4, 4, 5);
    let v = [0.4, -0.2, 0.9, 0.1];
    let x = Tensor::from_fn(&[8, 4], |i| v[i % 4]);
    let out = glam_forward(&store, &g, &x).unwrap();
    let want = linear_row(&store, &g.phi_v, &v);
    for i in 0..8 {
        assert_eq!(out.row(i), out.row(0));
    }
    assert!(max_diff(out.row(0), &want) < 1e-14);
}

#[test]
fn small_instance_matches_pairwise_oracle() {
    let (g, store) = random_glam(4, 4, 2, 0);
    let x = uniform(&[8, 4], &mut rng(0), 1.0);
    let got = glam_forward(&store, &g, &x).unwrap();
    assert!(max_diff(got.data(), &pairwise_oracle(&store, &g, &x)) < 1e-6);
}

#[test]
fn bucketed_instances_match_pairwise_oracle() {
    let mut r = rng(20);
    for (t, d) in [2, 4, 8].into_iter().cycle().take(12).enumerate() {
        let n = r.random_range(1..=64);
        let c = r.random_range(d..=16);
        let (g, store) = random_glam(c, c, d, t as u64);
        let x = uniform(&[n, c], &mut r, 1.0);
        let got = glam_forward(&store, &g, &x).unwrap();
        assert!(max_diff(got.data(), &pairwise_oracle(&store, &g, &x)) < 1e-6);
    }
}

#[test]
fn orthonormal_tokens_give_closed_form_weights() {
    let n = 4;
    let (g, mut store) = random_glam(n, n, 1, 0);
    for lin in [&g.phi_q, &g.phi_k, &g.phi_v] {
        set_identity(&mut store, lin);
    }
    store.set(g.ass_out.weight, Tensor::zeros(&[n, 1])).unwrap();
    store.set(g.ass_out.bias, Tensor::zeros(&[1])).unwrap();
    let x = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
    let out = dense_attention_reference(&store, &g, &x).unwrap();
    let e = 1f64.exp();
    let z = e + (n - 1) as f64;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { e / z } else { 1.0 / z };
            assert!((out.get(&[i, j]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn padded_layout_matches_variable_layout() {
    let mut r = rng(30);
    for seed in 0..5 {
        let (g, store) = random_glam(8, 8, 4, seed);
        let x = uniform(&[40, 8], &mut r, 1.0);
        let a = glam_forward_exec(&store, &g, &x, Execution::Variable).unwrap();
        let b = glam_forward_exec(&store, &g, &x, Execution::Padded).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}

#[test]
fn outputs_ignore_tokens_from_other_buckets() {
    let (g, store) = random_glam(6, 6, 4, 2);
    let mut r = rng(3);
    let x = uniform(&[30, 6], &mut r, 1.0);
    let base = glam_forward(&store, &g, &x).unwrap();
    let bucket = |x: &Tensor<f64>, i: usize| bucket_oracle(&store, &g, x.row(i));
    let mut checked = 0;
    for t in 0..30 {
        let mut data = x.data().to_vec();
        for v in &mut data[t * 6..(t + 1) * 6] {
            *v = r.random_range(-3.0..3.0);
        }
        let mutated = Tensor::new(vec![30, 6], data).unwrap();
        let out = glam_forward(&store, &g, &mutated).unwrap();
        for i in (0..30).filter(|&i| i != t) {
            let bi = bucket(&x, i);
            if bucket(&x, t) != bi && bucket(&mutated, t) != bi {
                assert_eq!(out.row(i), base.row(i), "row {i} changed when token {t} moved");
                checked += 1;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn trace_weights_normalize_and_round_trip() {
    let (g, store) = random_glam(6, 6, 3, 9);
    let x = uniform(&[25, 6], &mut rng(1), 1.0);
    let trace = attention_trace(&store, &g, &x).unwrap();
    assert_eq!(trace.queries.len(), 25);
    for q in &trace.queries {
        assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(q.keys.contains(&q.query));
        assert_eq!(q.bucket, bucket_oracle(&store, &g, x.row(q.query)));
        assert!((q.ass - ass_oracle(&store, &g, x.row(q.query))).abs() < 1e-9);
    }
    let parsed = AttentionTrace::from_text(&trace.to_text()).unwrap();
    assert_eq!(parsed, trace);
}

#[test]
fn adaptive_score_shift_leaves_weights_unchanged() {
    let (g, mut store) = random_glam(5, 5, 2, 4);
    let x = uniform(&[20, 5], &mut rng(2), 1.0);
    let before = glam_forward(&store, &g, &x).unwrap();
    store.set(g.ass_out.bias, Tensor::new(vec![1], vec![3.5]).unwrap()).unwrap();
    let after = glam_forward(&store, &g, &x).unwrap();
    assert!(before.max_abs_diff(&after) < 1e-12);
}
