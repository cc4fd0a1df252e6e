//! Blur-kernel synthesis: isotropic/anisotropic Gaussians and rasterized
//! motion streaks, plus the K1..K12 presets (four isotropic widths 0.7,
//! 1.2, 1.6, 2.0, four anisotropic, four motion).

use crate::error::{LorunError, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_KERNEL_SIZE: usize = 15;

/// Isotropic Gaussian widths behind presets K1..K4.
pub const ISO_WIDTHS: [f64; 4] = [0.7, 1.2, 1.6, 2.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    IsoGauss { width: f64 },
    AnisoGauss { width_x: f64, width_y: f64, angle: f64 },
    Motion { length: f64, angle: f64 },
}

/// Build a normalized `size`×`size` kernel (odd size).
pub fn make_kernel<S: Scalar>(spec: KernelSpec, size: usize) -> Result<Tensor<S>> {
    if size % 2 == 0 || size == 0 {
        return Err(LorunError::Dimension(format!(
            "kernel size must be odd and positive, got {size}"
        )));
    }
    let grid = match spec {
        KernelSpec::IsoGauss { width } => {
            check_width(width)?;
            gaussian(size, width, width, 0.0)
        }
        KernelSpec::AnisoGauss {
            width_x,
            width_y,
            angle,
        } => {
            check_width(width_x)?;
            check_width(width_y)?;
            gaussian(size, width_x, width_y, angle)
        }
        KernelSpec::Motion { length, angle } => {
            if length <= 0.0 || length as usize > size {
                return Err(LorunError::Config(format!(
                    "motion length {length} must be in (0, {size}]"
                )));
            }
            motion(size, length, angle)
        }
    };
    let sum: f64 = grid.iter().sum();
    let data = grid.iter().map(|&v| S::from_f64(v / sum)).collect();
    Tensor::from_vec(vec![size, size], data)
}

/// The paper-style presets: id in "K1".."K12".
pub fn preset<S: Scalar>(id: &str, size: usize) -> Result<Tensor<S>> {
    let spec = preset_spec(id)?;
    make_kernel(spec, size)
}

pub fn preset_spec(id: &str) -> Result<KernelSpec> {
    use std::f64::consts::PI;
    let spec = match id {
        "K1" => KernelSpec::IsoGauss { width: ISO_WIDTHS[0] },
        "K2" => KernelSpec::IsoGauss { width: ISO_WIDTHS[1] },
        "K3" => KernelSpec::IsoGauss { width: ISO_WIDTHS[2] },
        "K4" => KernelSpec::IsoGauss { width: ISO_WIDTHS[3] },
        "K5" => KernelSpec::AnisoGauss { width_x: 2.0, width_y: 0.7, angle: 0.0 },
        "K6" => KernelSpec::AnisoGauss { width_x: 2.0, width_y: 0.7, angle: PI / 4.0 },
        "K7" => KernelSpec::AnisoGauss { width_x: 2.4, width_y: 1.2, angle: PI / 2.0 },
        "K8" => KernelSpec::AnisoGauss { width_x: 2.4, width_y: 1.2, angle: 3.0 * PI / 4.0 },
        "K9" => KernelSpec::Motion { length: 9.0, angle: 0.0 },
        "K10" => KernelSpec::Motion { length: 9.0, angle: PI / 4.0 },
        "K11" => KernelSpec::Motion { length: 13.0, angle: PI / 2.0 },
        "K12" => KernelSpec::Motion { length: 13.0, angle: 3.0 * PI / 4.0 },
        other => {
            return Err(LorunError::Config(format!(
                "unknown kernel preset {other}, expected K1..K12"
            )))
        }
    };
    Ok(spec)
}

fn check_width(w: f64) -> Result<()> {
    if w <= 0.0 {
        return Err(LorunError::Config(format!(
            "Gaussian width must be positive, got {w}"
        )));
    }
    Ok(())
}

fn gaussian(size: usize, sx: f64, sy: f64, angle: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let (cos, sin) = (angle.cos(), angle.sin());
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - c;
            let dy = y as f64 - c;
            // rotate into the kernel frame, then axis-aligned quadratic
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            out[y * size + x] = (-0.5 * (u * u / (sx * sx) + v * v / (sy * sy))).exp();
        }
    }
    out
}

/// Rasterized line segment of the given length/angle, box-blurred once.
fn motion(size: usize, length: f64, angle: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let (cos, sin) = (angle.cos(), angle.sin());
    let mut line = vec![0.0; size * size];
    let steps = (length * 8.0).ceil() as usize;
    for i in 0..=steps {
        let t = (i as f64 / steps as f64 - 0.5) * length;
        let x = (c + t * cos).round();
        let y = (c + t * sin).round();
        if x >= 0.0 && y >= 0.0 && (x as usize) < size && (y as usize) < size {
            line[y as usize * size + x as usize] = 1.0;
        }
    }
    // single 3x3 box blur pass
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sy = y as i64 + dy;
                    let sx = x as i64 + dx;
                    if sy >= 0 && sx >= 0 && (sy as usize) < size && (sx as usize) < size {
                        acc += line[sy as usize * size + sx as usize];
                    }
                }
            }
            out[y * size + x] = acc / 9.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot90(k: &Tensor<f64>) -> Tensor<f64> {
        let n = k.shape()[0];
        let d = k.data();
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                out[x * n + (n - 1 - y)] = d[y * n + x];
            }
        }
        Tensor::from_vec(vec![n, n], out).unwrap()
    }

    #[test]
    fn iso_kernel_unit_sum_and_quarter_turn_symmetric() {
        let k: Tensor<f64> = make_kernel(KernelSpec::IsoGauss { width: 0.7 }, 15).unwrap();
        let sum: f64 = k.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(k.max_abs_diff(&rot90(&k)).unwrap() < 1e-15);
    }

    #[test]
    fn aniso_with_equal_widths_degenerates_to_iso() {
        let iso: Tensor<f64> = make_kernel(KernelSpec::IsoGauss { width: 1.2 }, 15).unwrap();
        let aniso: Tensor<f64> = make_kernel(
            KernelSpec::AnisoGauss {
                width_x: 1.2,
                width_y: 1.2,
                angle: 0.73,
            },
            15,
        )
        .unwrap();
        assert!(iso.max_abs_diff(&aniso).unwrap() < 1e-12);
    }

    #[test]
    fn every_preset_normalizes() {
        for i in 1..=12 {
            let id = format!("K{i}");
            let k: Tensor<f64> = preset(&id, 15).unwrap();
            let sum: f64 = k.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "{id} sum {sum}");
            assert!(k.data().iter().all(|&v| v >= 0.0), "{id} negative entry");
        }
        assert!(preset::<f64>("K13", 15).is_err());
    }

    #[test]
    fn invalid_width_rejected() {
        assert!(make_kernel::<f64>(KernelSpec::IsoGauss { width: 0.0 }, 15).is_err());
        assert!(make_kernel::<f64>(KernelSpec::IsoGauss { width: -1.0 }, 15).is_err());
        assert!(make_kernel::<f64>(KernelSpec::IsoGauss { width: 1.0 }, 14).is_err());
    }
}
