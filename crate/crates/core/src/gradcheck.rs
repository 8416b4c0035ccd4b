//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest denominator of the relative error, so that gradients that are
/// zero up to rounding are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// Coordinate that attains the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of the scalar `f(x)` with central differences
/// on every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, eps, &coords)
}

/// Like [`grad_check`], restricted to the listed coordinates.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("grad_check: eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone())?;
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    let full = tape.grad(leaf);

    let eval = |data: Vec<f64>, i: usize, sign: &str| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(x.shape().to_vec(), data)?)?;
        let r = f(&mut t, v).map_err(|e| Error::NonFinite {
            op: format!("grad_check coordinate {i} at x{sign}eps: {e}"),
        })?;
        let value = t.value(r).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: format!("grad_check coordinate {i} at x{sign}eps"),
            });
        }
        Ok(value)
    };

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut worst = (0.0, 0);
    for &i in coords {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fd = (eval(plus, i, "+")? - eval(minus, i, "-")?) / (2.0 * eps);
        let an = full.data()[i];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(REL_FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
        analytic.push(an);
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.0, 2.0, 4.0, 1e-3]).unwrap();
        let r = grad_check(|t, v| t.sum(v), &x, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 0.5, 0.5, 3.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.softmax(v)?;
                t.sum(s)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(r.analytic.iter().all(|g| g.abs() < 1e-12));
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(|t, v| t.sum(v), &x, 1e-1).is_err());
    }
}
