//! Super-resolution degradation: circular blur followed by s-fold
//! decimation anchored at the top-left pixel.
//!
//! The blur is a true convolution (kernel flipped); its adjoint is the
//! circular correlation, and decimation's adjoint is zero upsampling.

use crate::error::{LorunError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct SrParams<S> {
    /// Nonnegative blur kernel normalized to unit sum, odd extents.
    pub kernel: Tensor<S>,
    /// Integer decimation factor, ≥ 1.
    pub scale: usize,
    /// Preset label (K1..K12) when the kernel came from one.
    pub kernel_id: Option<String>,
}

impl<S: Scalar> SrParams<S> {
    pub fn new(kernel: Tensor<S>, scale: usize) -> Result<Self> {
        if kernel.ndim() != 2 || kernel.shape()[0] % 2 == 0 || kernel.shape()[1] % 2 == 0 {
            return Err(LorunError::Dimension(format!(
                "blur kernel must be 2-D with odd extents, got {:?}",
                kernel.shape()
            )));
        }
        if scale == 0 {
            return Err(LorunError::Config("scale factor must be >= 1".into()));
        }
        if kernel.data().iter().any(|&v| v.to_f64() < 0.0) {
            return Err(LorunError::Config("blur kernel must be nonnegative".into()));
        }
        let sum: f64 = kernel.data().iter().map(|&v| v.to_f64()).sum();
        if sum <= 0.0 {
            return Err(LorunError::Config("blur kernel must have positive mass".into()));
        }
        let kernel = kernel.scale(S::from_f64(1.0 / sum));
        Ok(SrParams {
            kernel,
            scale,
            kernel_id: None,
        })
    }

    /// True when the kernel is exactly a centered Dirac, which makes
    /// Φ Φᵀ the identity and the Gram solve closed-form.
    pub fn is_dirac(&self) -> bool {
        let (kh, kw) = (self.kernel.shape()[0], self.kernel.shape()[1]);
        let center = (kh / 2) * kw + kw / 2;
        self.kernel
            .data()
            .iter()
            .enumerate()
            .all(|(i, &v)| (v.to_f64() - if i == center { 1.0 } else { 0.0 }).abs() == 0.0)
    }
}

fn check_signal<S: Scalar>(x: &Tensor<S>, scale: usize) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(LorunError::Dimension(format!(
            "SR input must be [C,H,W], got {:?}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % scale != 0 || w % scale != 0 {
        return Err(LorunError::Dimension(format!(
            "spatial dims {h}x{w} not divisible by scale {scale}"
        )));
    }
    Ok((c, h, w))
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Circular convolution with the kernel (flipped application).
fn blur<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (cu, cv) = ((kh / 2) as isize, (kw / 2) as isize);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![S::ZERO; c * h * w];
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let kv = kd[u * kw + v];
                if kv.to_f64() == 0.0 {
                    continue;
                }
                let dy = u as isize - cu;
                let dx = v as isize - cv;
                for y in 0..h {
                    let sy = wrap(y as isize - dy, h);
                    let orow = &mut out[(ci * h + y) * w..(ci * h + y + 1) * w];
                    let xrow = &xd[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                    for (xo, o) in orow.iter_mut().enumerate() {
                        *o += kv * xrow[wrap(xo as isize - dx, w)];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out).expect("same shape")
}

/// Circular correlation with the kernel — the adjoint of [`blur`].
fn blur_adjoint<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (cu, cv) = ((kh / 2) as isize, (kw / 2) as isize);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![S::ZERO; c * h * w];
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let kv = kd[u * kw + v];
                if kv.to_f64() == 0.0 {
                    continue;
                }
                let dy = u as isize - cu;
                let dx = v as isize - cv;
                for y in 0..h {
                    let sy = wrap(y as isize + dy, h);
                    let orow = &mut out[(ci * h + y) * w..(ci * h + y + 1) * w];
                    let xrow = &xd[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                    for (xo, o) in orow.iter_mut().enumerate() {
                        *o += kv * xrow[wrap(xo as isize + dx, w)];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out).expect("same shape")
}

/// `y = (x ∗ k) ↓ s`, output `[C, H/s, W/s]`.
pub fn forward<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>, scale: usize) -> Result<Tensor<S>> {
    let (c, h, w) = check_signal(x, scale)?;
    let blurred = blur(x, kernel);
    let (oh, ow) = (h / scale, w / scale);
    let bd = blurred.data();
    let mut y = vec![S::ZERO; c * oh * ow];
    for ci in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                y[(ci * oh + yy) * ow + xx] = bd[(ci * h + yy * scale) * w + xx * scale];
            }
        }
    }
    Tensor::from_vec(vec![c, oh, ow], y)
}

/// Adjoint: zero-upsample then correlate, output `[C, H, W]`.
pub fn adjoint<S: Scalar>(y: &Tensor<S>, kernel: &Tensor<S>, scale: usize) -> Result<Tensor<S>> {
    if y.ndim() != 3 {
        return Err(LorunError::Dimension(format!(
            "SR measurement must be [C,H,W], got {:?}",
            y.shape()
        )));
    }
    let (c, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let (h, w) = (oh * scale, ow * scale);
    let yd = y.data();
    let mut up = vec![S::ZERO; c * h * w];
    for ci in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                up[(ci * h + yy * scale) * w + xx * scale] = yd[(ci * oh + yy) * ow + xx];
            }
        }
    }
    let up = Tensor::from_vec(vec![c, h, w], up)?;
    Ok(blur_adjoint(&up, kernel))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirac(n: usize) -> Tensor<f64> {
        let mut k = vec![0.0; n * n];
        k[(n / 2) * n + n / 2] = 1.0;
        Tensor::from_vec(vec![n, n], k).unwrap()
    }

    #[test]
    fn dirac_downsample_anchors_top_left() {
        let x = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = forward(&x, &dirac(3), 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn dirac_scale_one_is_identity() {
        let x = Tensor::from_vec(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let y = forward(&x, &dirac(5), 1).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() == 0.0);
        let back = adjoint(&x, &dirac(5), 1).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() == 0.0);
    }

    #[test]
    fn params_normalize_and_validate() {
        let k = Tensor::from_vec(vec![3, 3], vec![1.0f64; 9]).unwrap();
        let p = SrParams::new(k, 2).unwrap();
        let sum: f64 = p.kernel.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(!p.is_dirac());
        assert!(SrParams::new(Tensor::<f64>::zeros(&[2, 2]), 2).is_err());
        let neg = Tensor::from_vec(vec![1, 1], vec![-1.0f64]).unwrap();
        assert!(SrParams::new(neg, 2).is_err());
    }

    #[test]
    fn indivisible_dims_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 5, 4]);
        assert!(forward(&x, &dirac(3), 2).is_err());
    }
}
