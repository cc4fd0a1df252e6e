//! Numerical verification helpers: finite-difference gradients and the
//! relative-error convention used by the gradient suite and `verify`.

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Relative error with a magnitude floor: coordinates below the floor are
/// compared absolutely (scaled by the floor), keeping central-difference
/// roundoff from dominating near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(0.1)
}

/// Central finite difference of a scalar function at one coordinate.
pub fn central_diff<F>(f: &F, x: &Tensor<f64>, coord: usize, h: f64) -> f64
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let v = x.data()[coord];
    let fp = f(&x.with_element(coord, v + h));
    let fm = f(&x.with_element(coord, v - h));
    (fp - fm) / (2.0 * h)
}

/// Full finite-difference gradient. Only for small tensors.
pub fn fd_gradient<F>(f: &F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let g: Vec<f64> = (0..x.numel()).map(|i| central_diff(f, x, i, h)).collect();
    Tensor::from_vec(x.shape().to_vec(), g).expect("same shape")
}

/// Compare an analytic gradient against central differences on a seeded
/// sample of coordinates (all coordinates when the tensor is small).
/// Returns the worst relative error seen.
pub fn check_grad_sampled<F>(
    f: &F,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    max_samples: usize,
    seed: u64,
) -> f64
where
    F: Fn(&Tensor<f64>) -> f64,
{
    assert_eq!(x.shape(), analytic.shape(), "gradient shape mismatch");
    let n = x.numel();
    let coords: Vec<usize> = if n <= max_samples {
        (0..n).collect()
    } else {
        let mut rng = Rng::for_purpose(seed, "fd-coords");
        (0..max_samples).map(|_| rng.index(n)).collect()
    };
    let mut worst = 0.0f64;
    for c in coords {
        let fd = central_diff(f, x, c, h);
        worst = worst.max(rel_err(analytic.data()[c], fd));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_analytic_square() {
        // f(x) = sum(x^2), gradient 2x
        let x = Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let f = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>();
        let g = fd_gradient(&f, &x, 1e-6);
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!(rel_err(*gi, 2.0 * xi) < 1e-8);
        }
    }

    #[test]
    fn rel_err_floors_near_zero() {
        assert!(rel_err(1e-9, -1e-9) < 1e-7);
        assert!(rel_err(1.0, 1.0001) > 9e-5);
        assert!(rel_err(0.0, 1.0) == 1.0);
    }
}
