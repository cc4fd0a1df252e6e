//! Coded-aperture snapshot spectral imaging: every band of the cube is
//! masked, sheared sideways by `d` columns per band, and summed into a
//! single 2-D measurement of width `W + d·(C−1)`.

use crate::error::{LorunError, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct CassiParams<S> {
    /// Coded aperture in [0,1], shape `[H, W]`.
    pub mask: Tensor<S>,
    /// Shift step per band, ≥ 1.
    pub shift: usize,
    /// Number of spectral bands.
    pub bands: usize,
}

impl<S: Scalar> CassiParams<S> {
    pub fn new(mask: Tensor<S>, shift: usize, bands: usize) -> Result<Self> {
        if mask.ndim() != 2 {
            return Err(LorunError::Dimension(format!(
                "mask must be 2-D, got {:?}",
                mask.shape()
            )));
        }
        if shift == 0 || bands == 0 {
            return Err(LorunError::Config(
                "shift step and band count must be >= 1".into(),
            ));
        }
        if mask
            .data()
            .iter()
            .any(|&v| v.to_f64() < 0.0 || v.to_f64() > 1.0)
        {
            return Err(LorunError::Config("mask entries must lie in [0,1]".into()));
        }
        Ok(CassiParams { mask, shift, bands })
    }

    /// Seeded Bernoulli(0.5) binary mask.
    pub fn random_binary(h: usize, w: usize, bands: usize, shift: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::for_purpose(seed, "cassi-mask");
        let data = (0..h * w)
            .map(|_| {
                if rng.uniform() < 0.5 {
                    S::ZERO
                } else {
                    S::ONE
                }
            })
            .collect();
        let mask = Tensor::from_vec(vec![h, w], data)?;
        Self::new(mask, shift, bands)
    }

    pub fn measurement_width(&self) -> usize {
        self.mask.shape()[1] + self.shift * (self.bands - 1)
    }

    pub fn measurement_shape(&self) -> Vec<usize> {
        vec![self.mask.shape()[0], self.measurement_width()]
    }

    pub fn signal_shape(&self) -> Vec<usize> {
        vec![self.bands, self.mask.shape()[0], self.mask.shape()[1]]
    }
}

fn check_signal<S: Scalar>(x: &Tensor<S>, mask: &Tensor<S>, bands: usize) -> Result<(usize, usize)> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if x.shape() != [bands, h, w] {
        return Err(LorunError::Dimension(format!(
            "CASSI cube must be [{bands}, {h}, {w}], got {:?}",
            x.shape()
        )));
    }
    Ok((h, w))
}

/// `Y[h, w + d·k] = Σ_k X[k,h,w] · M[h,w]`.
pub fn forward<S: Scalar>(x: &Tensor<S>, mask: &Tensor<S>, d: usize) -> Result<Tensor<S>> {
    let bands = x.shape()[0];
    let (h, w) = check_signal(x, mask, bands)?;
    let ow = w + d * (bands - 1);
    let xd = x.data();
    let md = mask.data();
    let mut y = vec![S::ZERO; h * ow];
    for k in 0..bands {
        let off = d * k;
        for r in 0..h {
            let xrow = &xd[(k * h + r) * w..(k * h + r + 1) * w];
            let mrow = &md[r * w..(r + 1) * w];
            let yrow = &mut y[r * ow + off..r * ow + off + w];
            for ((yo, &xv), &mv) in yrow.iter_mut().zip(xrow).zip(mrow) {
                *yo += xv * mv;
            }
        }
    }
    Tensor::from_vec(vec![h, ow], y)
}

/// `X̂[k,h,w] = Y[h, w + d·k] · M[h,w]` — the exact adjoint of `forward`.
pub fn adjoint<S: Scalar>(y: &Tensor<S>, mask: &Tensor<S>, d: usize, bands: usize) -> Result<Tensor<S>> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let ow = w + d * (bands - 1);
    if y.shape() != [h, ow] {
        return Err(LorunError::Dimension(format!(
            "CASSI measurement must be [{h}, {ow}], got {:?}",
            y.shape()
        )));
    }
    let yd = y.data();
    let md = mask.data();
    let mut x = vec![S::ZERO; bands * h * w];
    for k in 0..bands {
        let off = d * k;
        for r in 0..h {
            let yrow = &yd[r * ow + off..r * ow + off + w];
            let mrow = &md[r * w..(r + 1) * w];
            let xrow = &mut x[(k * h + r) * w..(k * h + r + 1) * w];
            for ((xo, &yv), &mv) in xrow.iter_mut().zip(yrow).zip(mrow) {
                *xo = yv * mv;
            }
        }
    }
    Tensor::from_vec(vec![bands, h, w], x)
}

/// Gradient of `forward` w.r.t. the mask: Σ_k g[h, w+dk] · x[k,h,w].
pub fn forward_vjp_mask<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>, d: usize) -> Result<Tensor<S>> {
    let (bands, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ow = w + d * (bands - 1);
    let xd = x.data();
    let gd = g.data();
    let mut gm = vec![S::ZERO; h * w];
    for k in 0..bands {
        let off = d * k;
        for r in 0..h {
            let grow = &gd[r * ow + off..r * ow + off + w];
            let xrow = &xd[(k * h + r) * w..(k * h + r + 1) * w];
            let mrow = &mut gm[r * w..(r + 1) * w];
            for ((mo, &gv), &xv) in mrow.iter_mut().zip(grow).zip(xrow) {
                *mo += gv * xv;
            }
        }
    }
    Tensor::from_vec(vec![h, w], gm)
}

/// Gradient of `adjoint` w.r.t. the mask: Σ_k g[k,h,w] · y[h, w+dk].
pub fn adjoint_vjp_mask<S: Scalar>(
    y: &Tensor<S>,
    g: &Tensor<S>,
    d: usize,
) -> Result<Tensor<S>> {
    let (bands, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let ow = w + d * (bands - 1);
    let yd = y.data();
    let gd = g.data();
    let mut gm = vec![S::ZERO; h * w];
    for k in 0..bands {
        let off = d * k;
        for r in 0..h {
            let yrow = &yd[r * ow + off..r * ow + off + w];
            let grow = &gd[(k * h + r) * w..(k * h + r + 1) * w];
            let mrow = &mut gm[r * w..(r + 1) * w];
            for ((mo, &yv), &gv) in mrow.iter_mut().zip(yrow).zip(grow) {
                *mo += yv * gv;
            }
        }
    }
    Tensor::from_vec(vec![h, w], gm)
}

/// Diagonal of Φ Φᵀ at each measurement pixel: Σ_k M[h, w′−dk]².
pub fn gram_diagonal<S: Scalar>(mask: &Tensor<S>, d: usize, bands: usize) -> Tensor<S> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let ow = w + d * (bands - 1);
    let md = mask.data();
    let mut diag = vec![S::ZERO; h * ow];
    for k in 0..bands {
        let off = d * k;
        for r in 0..h {
            let mrow = &md[r * w..(r + 1) * w];
            let drow = &mut diag[r * ow + off..r * ow + off + w];
            for (o, &mv) in drow.iter_mut().zip(mrow) {
                *o += mv * mv;
            }
        }
    }
    Tensor::from_vec(vec![h, ow], diag).expect("shape math")
}
