//! Finite-difference checks shared by the gradient tests and the acceptance run.

#![allow(dead_code)]

use std::sync::Arc;

use crate::common::*;
use gatrans_core::autodiff::{Conv2dSpec, Tape, Var};
use gatrans_core::glam::{s_ass, s_mass, GlamConfig};
use gatrans_core::gradcheck::grad_check;
use gatrans_core::losses::{cross_entropy, dice_loss, discriminator_loss, generator_objective, mse_loss, LossWeights};
use gatrans_core::models::{class_probabilities, Discriminator, DiscriminatorConfig, GtBlock, Gtnet, GtnetConfig};
use gatrans_core::nn::{Bound, ParamStore};
use gatrans_core::slh::BucketAssignment;
use gatrans_core::{Result, Tensor};
use rand::Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Contracts `y` against a fixed random tensor so every output entry
/// contributes to the checked scalar.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(t.shape(y), &mut rng(seed), 1.0);
    let w = t.constant(w)?;
    let m = t.mul(y, w)?;
    t.sum(m)
}

/// Runs `build` on 10 random inputs of `shape`; `build` gets the input leaf
/// and a per-trial seed for its own constants.
fn check_op(name: &str, shape: &[usize], scale: f64, build: impl Fn(&mut Tape<f64>, Var, u64) -> Result<Var>) {
    for trial in 0..10u64 {
        let x = uniform(shape, &mut rng(1000 + trial), scale);
        let report = grad_check(|t, v| {
            let y = build(t, v, trial)?;
            project(t, y, 77 + trial)
        }, &x, EPS)
        .unwrap();
        assert!(report.max_rel_error < TOL, "{name} trial {trial}: {}", report.max_rel_error);
    }
}

fn konst(t: &mut Tape<f64>, shape: &[usize], seed: u64) -> Result<Var> {
    t.constant(uniform(shape, &mut rng(seed), 1.0))
}

pub fn elementwise_ops() {
    check_op("add", &[3, 4], 1.0, |t, x, s| { let c = konst(t, &[3, 4], s)?; t.add(x, c) });
    check_op("sub", &[3, 4], 1.0, |t, x, s| { let c = konst(t, &[3, 4], s)?; t.sub(c, x) });
    check_op("mul", &[3, 4], 1.0, |t, x, s| { let c = konst(t, &[3, 4], s)?; t.mul(x, c) });
    check_op("mul_self", &[5], 1.0, |t, x, _| t.mul(x, x));
    check_op("div_num", &[3, 4], 1.0, |t, x, s| {
        let c = t.constant(uniform(&[3, 4], &mut rng(s), 1.0).map(|v| v.abs() + 0.5))?;
        t.div(x, c)
    });
    check_op("div_den", &[3, 4], 1.0, |t, x, s| {
        let c = konst(t, &[3, 4], s)?;
        let d = t.mul(x, x)?;
        let d = t.add_scalar(d, 0.5)?;
        t.div(c, d)
    });
    check_op("scale", &[6], 1.0, |t, x, _| t.scale(x, -2.5));
    check_op("add_scalar", &[6], 1.0, |t, x, _| t.add_scalar(x, 0.3));
    check_op("add_bias", &[2, 3, 4], 1.0, |t, x, s| { let b = konst(t, &[4], s)?; t.add_bias(x, b) });
    check_op("add_bias_grad_b", &[4], 1.0, |t, b, s| { let x = konst(t, &[2, 3, 4], s)?; t.add_bias(x, b) });
}

pub fn activations() {
    check_op("relu", &[20], 1.0, |t, x, _| t.relu(x));
    check_op("leaky_relu", &[20], 1.0, |t, x, _| t.leaky_relu(x, 0.2));
    check_op("gelu", &[20], 3.0, |t, x, _| t.gelu(x));
    check_op("sigmoid", &[20], 4.0, |t, x, _| t.sigmoid(x));
    check_op("log_sigmoid", &[20], 8.0, |t, x, _| t.log_sigmoid(x));
    check_op("log", &[20], 1.0, |t, x, _| {
        let y = t.mul(x, x)?;
        let y = t.add_scalar(y, 0.2)?;
        t.log(y)
    });
    check_op("softmax", &[3, 5], 2.0, |t, x, _| t.softmax(x));
    check_op("log_softmax", &[3, 5], 2.0, |t, x, _| t.log_softmax(x));
}

pub fn layer_norm_inputs_and_affine() {
    check_op("layer_norm_x", &[2, 3, 6], 1.0, |t, x, s| {
        let g = konst(t, &[6], s)?;
        let b = konst(t, &[6], s + 1)?;
        t.layer_norm(x, g, b)
    });
    check_op("layer_norm_gamma", &[6], 1.0, |t, g, s| {
        let x = konst(t, &[4, 6], s)?;
        let b = konst(t, &[6], s + 1)?;
        t.layer_norm(x, g, b)
    });
    check_op("layer_norm_beta", &[6], 1.0, |t, b, s| {
        let x = konst(t, &[4, 6], s)?;
        let g = konst(t, &[6], s + 1)?;
        t.layer_norm(x, g, b)
    });
}

pub fn layout_and_reduction_ops() {
    check_op("reshape", &[2, 6], 1.0, |t, x, _| t.reshape(x, &[3, 4]));
    check_op("permute", &[2, 3, 4], 1.0, |t, x, _| t.permute(x, &[2, 0, 1]));
    check_op("transpose", &[3, 5], 1.0, |t, x, _| t.transpose(x));
    check_op("concat", &[2, 3, 2], 1.0, |t, x, s| {
        let c = konst(t, &[2, 1, 2], s)?;
        t.concat(&[c, x, c], 1)
    });
    check_op("sum", &[4, 3], 1.0, |t, x, _| {
        let y = t.mul(x, x)?;
        t.sum(y)
    });
    check_op("mean", &[4, 3], 1.0, |t, x, _| {
        let y = t.mul(x, x)?;
        t.mean(y)
    });
    check_op("sum_axis", &[3, 4, 2], 1.0, |t, x, _| t.sum_axis(x, 1));
}

pub fn matrix_products() {
    check_op("matmul_a", &[3, 4], 1.0, |t, a, s| { let b = konst(t, &[4, 5], s)?; t.matmul(a, b) });
    check_op("matmul_b", &[4, 5], 1.0, |t, b, s| { let a = konst(t, &[3, 4], s)?; t.matmul(a, b) });
    check_op("batch_matmul_a", &[2, 3, 4], 1.0, |t, a, s| { let b = konst(t, &[2, 4, 2], s)?; t.batch_matmul(a, b) });
    check_op("batch_matmul_b", &[2, 4, 2], 1.0, |t, b, s| { let a = konst(t, &[2, 3, 4], s)?; t.batch_matmul(a, b) });
    check_op("linear_x", &[2, 3, 4], 1.0, |t, x, s| {
        let w = konst(t, &[4, 5], s)?;
        let b = konst(t, &[5], s + 1)?;
        t.linear(x, w, Some(b))
    });
    check_op("linear_w", &[4, 5], 1.0, |t, w, s| {
        let x = konst(t, &[6, 4], s)?;
        t.linear(x, w, None)
    });
}

pub fn convolutions() {
    let spec = Conv2dSpec { stride: 2, pad: 1 };
    check_op("conv2d_x", &[2, 3, 6, 6], 1.0, |t, x, s| {
        let w = konst(t, &[4, 3, 3, 3], s)?;
        let b = konst(t, &[4], s + 1)?;
        t.conv2d(x, w, Some(b), spec)
    });
    check_op("conv2d_w", &[4, 3, 3, 3], 1.0, |t, w, s| {
        let x = konst(t, &[2, 3, 5, 5], s)?;
        t.conv2d(x, w, None, Conv2dSpec { stride: 1, pad: 1 })
    });
    check_op("conv2d_b", &[4], 1.0, |t, b, s| {
        let x = konst(t, &[1, 3, 5, 5], s)?;
        let w = konst(t, &[4, 3, 3, 3], s + 1)?;
        t.conv2d(x, w, Some(b), spec)
    });
    check_op("conv_transpose2d_x", &[2, 3, 3, 3], 1.0, |t, x, s| {
        let w = konst(t, &[3, 2, 4, 4], s)?;
        let b = konst(t, &[2], s + 1)?;
        t.conv_transpose2d(x, w, Some(b), spec)
    });
    check_op("conv_transpose2d_w", &[3, 2, 2, 2], 1.0, |t, w, s| {
        let x = konst(t, &[2, 3, 3, 3], s)?;
        t.conv_transpose2d(x, w, None, Conv2dSpec { stride: 2, pad: 0 })
    });
}

fn fixed_buckets(n: usize, d: usize, seed: u64) -> Arc<Vec<BucketAssignment>> {
    let mut r = rng(seed);
    let ids = (0..n).map(|_| r.random_range(0..d)).collect();
    Arc::new(vec![BucketAssignment::from_buckets(ids, d).unwrap()])
}

pub fn bucket_attention_all_operands() {
    let (n, c) = (9, 4);
    for which in 0..4 {
        check_op("bucket_attention", &[1, n, if which == 3 { 1 } else { c }], 1.0, |t, x, s| {
            let mut ops = vec![
                konst(t, &[1, n, c], s)?,
                konst(t, &[1, n, c], s + 1)?,
                konst(t, &[1, n, c], s + 2)?,
                konst(t, &[1, n, 1], s + 3)?,
            ];
            ops[which] = x;
            t.bucket_attention(ops[0], ops[1], ops[2], ops[3], fixed_buckets(n, 3, s))
        });
    }
}

/// Central difference from `f(x+e)`, `f(x)`, `f(x-e)`, or `None` when the
/// two one-sided differences disagree: a bucket flipped inside the stencil
/// and the function jumped, so no derivative is defined there.
fn central(plus: f64, mid: f64, minus: f64) -> Option<f64> {
    let (fwd, bwd) = (plus - mid, mid - minus);
    if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-10 {
        return None;
    }
    Some((plus - minus) / (2.0 * EPS))
}

fn rel_error(an: f64, fd: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-3)
}

/// Compares tape gradients of every parameter with central differences on
/// up to `per_tensor` coordinates of each tensor. Returns the worst relative
/// error; at most a tenth of the coordinates may be skipped as jumps.
fn check_params(
    store: &ParamStore<f64>,
    per_tensor: usize,
    tol: f64,
    loss: impl Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true).unwrap();
    let root = loss(&mut tape, &p).unwrap();
    tape.backward(root).unwrap();
    let base = tape.value(root).item();
    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let p = s.bind(&mut t, false).unwrap();
        let r = loss(&mut t, &p).unwrap();
        t.value(r).item()
    };
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut r = rng(9);
    for (id, entry) in store.ids().zip(store.entries()) {
        if !entry.trainable {
            continue;
        }
        let analytic = tape.grad(p[id]);
        let len = entry.value.len();
        for _ in 0..per_tensor.min(len) {
            let i = r.random_range(0..len);
            let bump = |delta: f64| {
                let mut s = store.clone();
                let mut v = entry.value.data().to_vec();
                v[i] += delta;
                s.set(id, Tensor::new(entry.value.shape().to_vec(), v).unwrap()).unwrap();
                eval(&s)
            };
            checked += 1;
            let Some(fd) = central(bump(EPS), base, bump(-EPS)) else {
                skipped += 1;
                continue;
            };
            let an = analytic.data()[i];
            let rel = rel_error(an, fd);
            assert!(rel < tol, "{}[{i}]: analytic {an} numeric {fd}", entry.name);
            worst = worst.max(rel);
        }
    }
    assert!(skipped * 10 <= checked, "{skipped} of {checked} coordinates straddled a jump");
    worst
}

pub fn mass_and_adaptive_scores() {
    let (g, store) = random_glam(5, 6, 1, 3);
    let xj = uniform(&[1, 5], &mut rng(4), 1.0);
    for seed in 0..10 {
        let xi = uniform(&[1, 5], &mut rng(seed), 1.0);
        let p_store = store.clone();
        let r = grad_check(|t, v| {
            let p = p_store.bind(t, false)?;
            let b = t.constant(xj.clone())?;
            let s = s_mass(t, &p, &g, v, b)?;
            project(t, s, seed)
        }, &xi, EPS).unwrap();
        assert!(r.max_rel_error < TOL);
        let r = grad_check(|t, v| {
            let p = p_store.bind(t, false)?;
            let s = s_ass(t, &p, &g, v, 3)?;
            project(t, s, seed)
        }, &xi, EPS).unwrap();
        assert!(r.max_rel_error < TOL);
    }
    check_params(&store, 4, TOL, |t, p| {
        let a = t.constant(uniform(&[1, 5], &mut rng(1), 1.0))?;
        let b = t.constant(xj.clone())?;
        let m = s_mass(t, p, &g, a, b)?;
        let s = s_ass(t, p, &g, a, 2)?;
        let m = project(t, m, 1)?;
        let s = project(t, s, 2)?;
        t.add(m, s)
    });
}

pub fn glam_forward_with_fixed_buckets() {
    let (n, c) = (12, 6);
    for seed in 0..10 {
        let (g, store) = random_glam(c, c, 4, seed);
        let x = uniform(&[1, n, c], &mut rng(seed + 50), 1.0);
        let buckets = {
            let mut t = Tape::new();
            let p = store.bind(&mut t, false).unwrap();
            let v = t.constant(x.clone()).unwrap();
            Arc::new(g.assign(&t, &p, v).unwrap())
        };
        let r = grad_check(|t, v| {
            let p = store.bind(t, false)?;
            let y = g.forward_with(t, &p, v, buckets.clone())?;
            project(t, y, seed)
        }, &x, EPS).unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {}", r.max_rel_error);
        if seed < 3 {
            check_params(&store, 5, TOL, |t, p| {
                let v = t.constant(x.clone())?;
                let y = g.forward_with(t, p, v, buckets.clone())?;
                project(t, y, seed)
            });
        }
    }
}

pub fn adaptive_head_gets_zero_gradient() {
    let (g, store) = random_glam(4, 4, 2, 1);
    let x = uniform(&[1, 10, 4], &mut rng(2), 1.0);
    let mut t = Tape::new();
    let p = store.bind(&mut t, true).unwrap();
    let v = t.constant(x).unwrap();
    let y = g.forward(&mut t, &p, v).unwrap();
    let s = project(&mut t, y, 3).unwrap();
    t.backward(s).unwrap();
    for id in [g.ass_out.weight, g.ass_out.bias, g.ass_hidden.weight] {
        assert!(t.grad(p[id]).data().iter().all(|v| v.abs() < 1e-12));
    }
    assert!(t.grad(p[g.phi_q.weight]).data().iter().any(|v| v.abs() > 1e-6));
}

pub fn gt_block_with_fixed_buckets() {
    let (n, c) = (10, 4);
    for seed in 0..10 {
        let mut store = ParamStore::new();
        let cfg = GlamConfig { dim: c, ass_hidden: c, buckets: 2, hash_seed: seed };
        let block = GtBlock::new(&mut store, "b", cfg, 2, &mut rng(seed)).unwrap();
        let x = uniform(&[1, n, c], &mut rng(seed + 10), 1.0);
        let buckets = {
            let mut t = Tape::new();
            let p = store.bind(&mut t, false).unwrap();
            let v = t.constant(x.clone()).unwrap();
            let h = block.norm1.forward(&mut t, &p, v).unwrap();
            Arc::new(block.glam.assign(&t, &p, h).unwrap())
        };
        let run = |t: &mut Tape<f64>, p: &Bound, v: Var| -> Result<Var> {
            let h = block.norm1.forward(t, p, v)?;
            let y = block.forward_with(t, p, v, h, buckets.clone())?;
            project(t, y, seed)
        };
        let r = grad_check(|t, v| {
            let p = store.bind(t, false)?;
            run(t, &p, v)
        }, &x, EPS).unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {}", r.max_rel_error);
        if seed < 2 {
            check_params(&store, 3, TOL, |t, p| {
                let v = t.constant(x.clone())?;
                run(t, p, v)
            });
        }
    }
}

fn labels(len: usize, k: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    (0..len).map(|_| r.random_range(0..k as u8)).collect()
}

pub fn segmentation_losses() {
    let (n, k, h, w) = (2, 3, 3, 3);
    check_op("cross_entropy", &[n, k, h, w], 2.0, |t, x, s| cross_entropy(t, x, &labels(n * h * w, k, s)));
    check_op("mse", &[n, k, h, w], 1.0, |t, x, s| {
        let g = konst(t, &[n, k, h, w], s)?;
        mse_loss(t, x, g)
    });
    check_op("dice", &[n, k, h, w], 2.0, |t, x, s| {
        let p = class_probabilities(t, x)?;
        let g = gatrans_core::losses::one_hot::<f64>(&labels(n * h * w, k, s), n, k, h, w)?;
        let g = t.constant(g)?;
        dice_loss(t, p, g)
    });
    check_op("discriminator_loss", &[4], 3.0, |t, x, s| {
        let f = konst(t, &[4], s)?;
        discriminator_loss(t, x, f)
    });
}

pub fn generator_objective_through_discriminator() {
    let (n, k, h, w) = (1, 3, 16, 16);
    let cfg = DiscriminatorConfig { num_classes: k, widths: [3, 3, 3, 1], ..DiscriminatorConfig::default() };
    let (d, d_store) = Discriminator::new::<f64>(cfg).unwrap();
    let image = uniform(&[n, 3, h, w], &mut rng(1), 1.0);
    for seed in 0..10 {
        let x = uniform(&[n, k, h, w], &mut rng(seed), 2.0);
        let lab = labels(n * h * w, k, seed);
        let r = grad_check(|t, v| {
            let dp = d_store.bind(t, false)?;
            let img = t.constant(image.clone())?;
            let terms = generator_objective(t, Some((&d, &dp)), img, v, &lab, LossWeights::default())?;
            Ok(terms.total)
        }, &x, EPS).unwrap();
        assert!(r.max_rel_error < TOL, "seed {seed}: {}", r.max_rel_error);
    }
    let real = uniform(&[n, k, h, w], &mut rng(20), 1.0);
    check_params(&d_store, 4, TOL, |t, p| {
        let img = t.constant(image.clone())?;
        let a = t.constant(real.clone())?;
        let ra = d.condition(t, a, img)?;
        let zr = d.logits(t, p, ra)?;
        let b = t.constant(real.map(|v| 1.0 - v))?;
        let rb = d.condition(t, b, img)?;
        let zf = d.logits(t, p, rb)?;
        discriminator_loss(t, zr, zf)
    });
}

fn small_gtnet() -> GtnetConfig {
    GtnetConfig {
        num_classes: 3,
        patch_size: 2,
        stage_widths: vec![4, 8],
        stage_depths: vec![1, 1],
        tokens_per_bucket: 8,
        reference_size: 32,
        mlp_ratio: 2,
        head_width: 4,
        seed: 5,
        ..GtnetConfig::default()
    }
}

pub fn gtnet_end_to_end() {
    let (g, store) = Gtnet::new::<f64>(small_gtnet()).unwrap();
    let x = uniform(&[1, 3, 32, 32], &mut rng(3), 1.0);
    let loss = |t: &mut Tape<f64>, p: &Bound, v: Var| -> Result<Var> {
        let y = g.forward(t, p, v)?;
        project(t, y, 6)
    };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false).unwrap();
    let leaf = tape.leaf(x.clone()).unwrap();
    let root = loss(&mut tape, &p, leaf).unwrap();
    tape.backward(root).unwrap();
    let (base, analytic) = (tape.value(root).item(), tape.grad(leaf));
    let eval = |i: usize, delta: f64| {
        let mut v = x.data().to_vec();
        v[i] += delta;
        let mut t = Tape::new();
        let p = store.bind(&mut t, false).unwrap();
        let c = t.constant(Tensor::new(x.shape().to_vec(), v).unwrap()).unwrap();
        let r = loss(&mut t, &p, c).unwrap();
        t.value(r).item()
    };
    let mut r = rng(4);
    let mut skipped = 0;
    for _ in 0..40 {
        let i = r.random_range(0..x.len());
        match central(eval(i, EPS), base, eval(i, -EPS)) {
            Some(fd) => assert!(rel_error(analytic.data()[i], fd) < 1e-3, "input {i}"),
            None => skipped += 1,
        }
    }
    assert!(skipped <= 4);
    let worst = check_params(&store, 2, 1e-3, |t, p| {
        let v = t.constant(x.clone())?;
        loss(t, p, v)
    });
    assert!(worst < 1e-3);
}

/// Every check, by name.
pub const ALL: &[(&str, fn())] = &[
    ("elementwise_ops", elementwise_ops),
    ("activations", activations),
    ("layer_norm_inputs_and_affine", layer_norm_inputs_and_affine),
    ("layout_and_reduction_ops", layout_and_reduction_ops),
    ("matrix_products", matrix_products),
    ("convolutions", convolutions),
    ("bucket_attention_all_operands", bucket_attention_all_operands),
    ("mass_and_adaptive_scores", mass_and_adaptive_scores),
    ("glam_forward_with_fixed_buckets", glam_forward_with_fixed_buckets),
    ("adaptive_head_gets_zero_gradient", adaptive_head_gets_zero_gradient),
    ("gt_block_with_fixed_buckets", gt_block_with_fixed_buckets),
    ("segmentation_losses", segmentation_losses),
    ("generator_objective_through_discriminator", generator_objective_through_discriminator),
    ("gtnet_end_to_end", gtnet_end_to_end),
];
