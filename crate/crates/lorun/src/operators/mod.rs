//! The three degradation models as matched forward/adjoint pairs, noise
//! simulation, and the Gram-system solver used by HQS.

pub mod cassi;
pub mod cg;
pub mod cs;
pub mod graph_ops;
pub mod kernels;
pub mod sr;

pub use cassi::CassiParams;
pub use cs::CsParams;
pub use kernels::{make_kernel, preset as kernel_preset, KernelSpec};
pub use sr::SrParams;

use crate::error::{LorunError, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradationKind {
    Cs,
    Cassi,
    Sr,
}

impl DegradationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DegradationKind::Cs => "cs",
            DegradationKind::Cassi => "cassi",
            DegradationKind::Sr => "sr",
        }
    }
}

#[derive(Clone, Debug)]
pub enum OperatorParams<S> {
    Cs(CsParams<S>),
    Cassi(CassiParams<S>),
    Sr(SrParams<S>),
}

/// A forward/adjoint linear operator pair Φ/Φᵀ with optional learnability.
#[derive(Clone, Debug)]
pub struct DegradationModel<S> {
    pub params: OperatorParams<S>,
    /// Whether the operator's tensor (sampling matrix or mask) is trained.
    pub learnable: bool,
}

impl<S: Scalar> DegradationModel<S> {
    /// CS defaults to a learnable sampling matrix; CASSI and SR are fixed.
    pub fn cs(params: CsParams<S>) -> Self {
        DegradationModel {
            params: OperatorParams::Cs(params),
            learnable: true,
        }
    }

    pub fn cassi(params: CassiParams<S>) -> Self {
        DegradationModel {
            params: OperatorParams::Cassi(params),
            learnable: false,
        }
    }

    pub fn sr(params: SrParams<S>) -> Self {
        DegradationModel {
            params: OperatorParams::Sr(params),
            learnable: false,
        }
    }

    pub fn with_learnable(mut self, learnable: bool) -> Result<Self> {
        if learnable && matches!(self.params, OperatorParams::Sr(_)) {
            return Err(LorunError::Config(
                "SR blur kernels are not trainable in this toolkit".into(),
            ));
        }
        self.learnable = learnable;
        Ok(self)
    }

    pub fn kind(&self) -> DegradationKind {
        match &self.params {
            OperatorParams::Cs(_) => DegradationKind::Cs,
            OperatorParams::Cassi(_) => DegradationKind::Cassi,
            OperatorParams::Sr(_) => DegradationKind::Sr,
        }
    }

    /// The operator's own tensor (sampling matrix, mask, or kernel).
    pub fn param_tensor(&self) -> &Tensor<S> {
        match &self.params {
            OperatorParams::Cs(p) => &p.matrix,
            OperatorParams::Cassi(p) => &p.mask,
            OperatorParams::Sr(p) => &p.kernel,
        }
    }

    /// Rebuild with a replacement operator tensor (after an update step).
    pub fn with_param_tensor(&self, t: Tensor<S>) -> Result<Self> {
        self.param_tensor().check_same_shape(&t)?;
        let params = match &self.params {
            OperatorParams::Cs(p) => OperatorParams::Cs(CsParams {
                matrix: t,
                block_size: p.block_size,
            }),
            OperatorParams::Cassi(p) => OperatorParams::Cassi(CassiParams {
                mask: t,
                shift: p.shift,
                bands: p.bands,
            }),
            OperatorParams::Sr(p) => OperatorParams::Sr(SrParams {
                kernel: t,
                scale: p.scale,
                kernel_id: p.kernel_id.clone(),
            }),
        };
        Ok(DegradationModel {
            params,
            learnable: self.learnable,
        })
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        match &self.params {
            OperatorParams::Cs(p) => cs::forward(x, &p.matrix, p.block_size),
            OperatorParams::Cassi(p) => cassi::forward(x, &p.mask, p.shift),
            OperatorParams::Sr(p) => sr::forward(x, &p.kernel, p.scale),
        }
    }

    pub fn adjoint(&self, y: &Tensor<S>) -> Result<Tensor<S>> {
        match &self.params {
            OperatorParams::Cs(p) => cs::adjoint(y, &p.matrix, p.block_size),
            OperatorParams::Cassi(p) => cassi::adjoint(y, &p.mask, p.shift, p.bands),
            OperatorParams::Sr(p) => sr::adjoint(y, &p.kernel, p.scale),
        }
    }

    /// Solve `(ΦᵀΦ + μI) x = rhs`.
    ///
    /// Closed form via the push-through identity when ΦΦᵀ is diagonal
    /// (CASSI for any mask; SR with an exact Dirac kernel), conjugate
    /// gradient otherwise.
    pub fn solve_gram(&self, rhs: &Tensor<S>, mu: f64) -> Result<Tensor<S>> {
        if mu <= 0.0 {
            return Err(LorunError::Config(format!(
                "gram solve requires mu > 0, got {mu}"
            )));
        }
        let mu_s = S::from_f64(mu);
        match &self.params {
            OperatorParams::Cassi(p) => {
                // x = (rhs − Φᵀ((ΦΦᵀ+μI)⁻¹ Φ rhs)) / μ
                let diag = cassi::gram_diagonal(&p.mask, p.shift, p.bands);
                let frhs = self.forward(rhs)?;
                let scaled = frhs.zip_map(&diag, |f, d| f / (d + mu_s))?;
                let back = self.adjoint(&scaled)?;
                Ok(rhs.zip_map(&back, |r, b| (r - b) * (S::ONE / mu_s))?)
            }
            OperatorParams::Sr(p) if p.is_dirac() => {
                // ΦΦᵀ = I, so the inner inverse is scalar
                let frhs = self.forward(rhs)?;
                let scaled = frhs.scale(S::ONE / (S::ONE + mu_s));
                let back = self.adjoint(&scaled)?;
                Ok(rhs.zip_map(&back, |r, b| (r - b) * (S::ONE / mu_s))?)
            }
            _ => cg::solve(
                |v| {
                    let av = self.adjoint(&self.forward(v)?)?;
                    av.zip_map(v, |a, vi| a + mu_s * vi)
                },
                rhs,
                cg::CG_TOL,
                cg::CG_MAX_ITERS,
            ),
        }
    }

    /// Largest eigenvalue of ΦᵀΦ by power iteration (= ‖ΦᵀΦ‖₂).
    pub fn gram_spectral_norm(&self, signal_shape: &[usize], iters: usize, seed: u64) -> Result<f64> {
        let mut rng = Rng::for_purpose(seed, "power-iteration");
        let mut v = Tensor::<S>::randn(signal_shape, 1.0, &mut rng);
        let mut lambda = 0.0;
        for _ in 0..iters {
            let n = v.norm();
            if n == 0.0 {
                return Err(LorunError::Numeric("power iteration collapsed to zero".into()));
            }
            v = v.scale(S::from_f64(1.0 / n));
            let av = self.adjoint(&self.forward(&v)?)?;
            lambda = v.dot(&av)?;
            v = av;
        }
        Ok(lambda)
    }

    /// Worst normalized adjoint-identity residual
    /// |⟨Φx,y⟩ − ⟨x,Φᵀy⟩| / (‖x‖‖y‖) over seeded random probes.
    pub fn adjointness_residual(&self, signal_shape: &[usize], trials: usize, seed: u64) -> Result<f64> {
        let mut rng = Rng::for_purpose(seed, "adjoint-probe");
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let x = Tensor::<S>::randn(signal_shape, 1.0, &mut rng);
            let fx = self.forward(&x)?;
            let y = Tensor::<S>::randn(fx.shape(), 1.0, &mut rng);
            let aty = self.adjoint(&y)?;
            let lhs = fx.dot(&y)?;
            let rhs = x.dot(&aty)?;
            let denom = x.norm() * y.norm();
            worst = worst.max((lhs - rhs).abs() / denom);
        }
        Ok(worst)
    }
}

/// `y + n`, `n ~ N(0, σ²)` from the given seed; σ = 0 returns `y` unchanged.
pub fn add_noise<S: Scalar>(y: &Tensor<S>, sigma: f64, seed: u64) -> Result<Tensor<S>> {
    if sigma < 0.0 {
        return Err(LorunError::Config(format!(
            "noise level must be nonnegative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let mut rng = Rng::for_purpose(seed, "measurement-noise");
    let noise = Tensor::<S>::randn(y.shape(), sigma, &mut rng);
    y.add(&noise)
}
