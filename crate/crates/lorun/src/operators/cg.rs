//! Conjugate gradient for symmetric positive-definite systems given as a
//! linear-map closure.

use crate::error::{LorunError, Result};
use crate::tensor::{Scalar, Tensor};

pub const CG_TOL: f64 = 1e-8;
pub const CG_MAX_ITERS: usize = 200;

/// Solve `A x = b` to `‖Ax−b‖ ≤ tol·‖b‖` starting from zero.
///
/// Errors with the final residual when `max_iters` is exhausted first.
pub fn solve<S, F>(apply: F, b: &Tensor<S>, tol: f64, max_iters: usize) -> Result<Tensor<S>>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<Tensor<S>>,
{
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(Tensor::zeros(b.shape()));
    }
    let target = tol * b_norm;

    let mut x = Tensor::zeros(b.shape());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs_old = r.dot(&r)?;

    for _ in 0..max_iters {
        if rs_old.sqrt() <= target {
            return Ok(x);
        }
        let ap = apply(&p)?;
        let pap = p.dot(&ap)?;
        if pap.abs() < f64::MIN_POSITIVE {
            break;
        }
        let alpha = rs_old / pap;
        x = x.zip_map(&p, |xi, pi| xi + S::from_f64(alpha) * pi)?;
        r = r.zip_map(&ap, |ri, api| ri - S::from_f64(alpha) * api)?;
        let rs_new = r.dot(&r)?;
        let beta = rs_new / rs_old;
        p = r.zip_map(&p, |ri, pi| ri + S::from_f64(beta) * pi)?;
        rs_old = rs_new;
    }

    if rs_old.sqrt() <= target {
        Ok(x)
    } else {
        Err(LorunError::Numeric(format!(
            "conjugate gradient stalled at relative residual {:.3e} (target {tol:.1e}) after {max_iters} iterations",
            rs_old.sqrt() / b_norm
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_diagonal_system() {
        let b = Tensor::from_vec(vec![3], vec![2.0f64, 6.0, 12.0]).unwrap();
        let x = solve(
            |v| Ok(v.zip_map(&Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), |a, d| a * d).unwrap()),
            &b,
            1e-12,
            50,
        )
        .unwrap();
        assert!(x.max_abs_diff(&Tensor::from_vec(vec![3], vec![2.0, 3.0, 4.0]).unwrap()).unwrap() < 1e-10);
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let b = Tensor::<f64>::zeros(&[4]);
        let x = solve(|v| Ok(v.clone()), &b, 1e-8, 10).unwrap();
        assert!(x.norm() == 0.0);
    }

    #[test]
    fn reports_residual_on_stall() {
        // one iteration cannot solve a generic SPD system
        let b = Tensor::from_vec(vec![2], vec![1.0f64, 1.0]).unwrap();
        let a = move |v: &Tensor<f64>| {
            let d = v.data();
            Tensor::from_vec(vec![2], vec![2.0 * d[0] + d[1], d[0] + 3.0 * d[1]])
        };
        let err = solve(a, &b, 1e-14, 1).unwrap_err();
        assert!(err.to_string().contains("residual"));
    }
}
