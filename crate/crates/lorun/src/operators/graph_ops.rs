//! Differentiable graph wrappers for the degradation operators.
//!
//! Forward and adjoint applications enter the compute graph as custom ops
//! whose inputs are `[signal, operator-tensor]`, so a learnable sampling
//! matrix or mask participates in backprop. The HQS data solve is wrapped
//! with its implicit-function VJP: another Gram solve.

use std::sync::Arc;

use crate::error::{LorunError, Result};
use crate::graph::CustomOp;
use crate::tensor::{Scalar, Tensor};

use super::{cassi, cs, DegradationKind, DegradationModel, OperatorParams};

#[derive(Debug, Clone, Copy)]
enum Geometry {
    Cs { block: usize },
    Cassi { shift: usize, bands: usize },
    Sr { scale: usize },
}

impl Geometry {
    fn of<S: Scalar>(model: &DegradationModel<S>) -> Self {
        match &model.params {
            OperatorParams::Cs(p) => Geometry::Cs {
                block: p.block_size,
            },
            OperatorParams::Cassi(p) => Geometry::Cassi {
                shift: p.shift,
                bands: p.bands,
            },
            OperatorParams::Sr(p) => Geometry::Sr { scale: p.scale },
        }
    }
}

/// `y = Φ x`; inputs `[x, operator-tensor]`.
pub struct OperatorForward {
    geom: Geometry,
}

impl OperatorForward {
    pub fn new<S: Scalar>(model: &DegradationModel<S>) -> Arc<Self> {
        Arc::new(OperatorForward {
            geom: Geometry::of(model),
        })
    }
}

fn expect_two<'a, S: Scalar>(
    label: &str,
    inputs: &[&'a Tensor<S>],
) -> Result<(&'a Tensor<S>, &'a Tensor<S>)> {
    if inputs.len() != 2 {
        return Err(LorunError::Contract(format!(
            "{label} expects [signal, operator-tensor], got {} inputs",
            inputs.len()
        )));
    }
    Ok((inputs[0], inputs[1]))
}

impl<S: Scalar> CustomOp<S> for OperatorForward {
    fn label(&self) -> &'static str {
        "operator-forward"
    }

    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let (x, p) = expect_two("operator-forward", inputs)?;
        match self.geom {
            Geometry::Cs { block } => cs::forward(x, p, block),
            Geometry::Cassi { shift, .. } => cassi::forward(x, p, shift),
            Geometry::Sr { scale } => super::sr::forward(x, p, scale),
        }
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (x, p) = expect_two("operator-forward", inputs)?;
        let gx = if needs[0] {
            // VJP of a linear map is its adjoint
            Some(match self.geom {
                Geometry::Cs { block } => cs::adjoint(grad, p, block)?,
                Geometry::Cassi { shift, bands } => cassi::adjoint(grad, p, shift, bands)?,
                Geometry::Sr { scale } => super::sr::adjoint(grad, p, scale)?,
            })
        } else {
            None
        };
        let gp = if needs[1] {
            Some(match self.geom {
                Geometry::Cs { block } => cs::forward_vjp_matrix(x, grad, p.shape(), block)?,
                Geometry::Cassi { shift, .. } => cassi::forward_vjp_mask(x, grad, shift)?,
                Geometry::Sr { .. } => {
                    return Err(LorunError::Contract(
                        "SR blur kernel has no training path".into(),
                    ))
                }
            })
        } else {
            None
        };
        Ok(vec![gx, gp])
    }
}

/// `x = Φᵀ y`; inputs `[y, operator-tensor]`.
pub struct OperatorAdjoint {
    geom: Geometry,
}

impl OperatorAdjoint {
    pub fn new<S: Scalar>(model: &DegradationModel<S>) -> Arc<Self> {
        Arc::new(OperatorAdjoint {
            geom: Geometry::of(model),
        })
    }
}

impl<S: Scalar> CustomOp<S> for OperatorAdjoint {
    fn label(&self) -> &'static str {
        "operator-adjoint"
    }

    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let (y, p) = expect_two("operator-adjoint", inputs)?;
        match self.geom {
            Geometry::Cs { block } => cs::adjoint(y, p, block),
            Geometry::Cassi { shift, bands } => cassi::adjoint(y, p, shift, bands),
            Geometry::Sr { scale } => super::sr::adjoint(y, p, scale),
        }
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (y, p) = expect_two("operator-adjoint", inputs)?;
        let gy = if needs[0] {
            Some(match self.geom {
                Geometry::Cs { block } => cs::forward(grad, p, block)?,
                Geometry::Cassi { shift, .. } => cassi::forward(grad, p, shift)?,
                Geometry::Sr { scale } => super::sr::forward(grad, p, scale)?,
            })
        } else {
            None
        };
        let gp = if needs[1] {
            Some(match self.geom {
                Geometry::Cs { block } => cs::adjoint_vjp_matrix(y, grad, p.shape(), block)?,
                Geometry::Cassi { shift, .. } => cassi::adjoint_vjp_mask(y, grad, shift)?,
                Geometry::Sr { .. } => {
                    return Err(LorunError::Contract(
                        "SR blur kernel has no training path".into(),
                    ))
                }
            })
        } else {
            None
        };
        Ok(vec![gy, gp])
    }
}

/// HQS data step `x = (ΦᵀΦ + μI)⁻¹(Φᵀy + μw)`; inputs `[w, y, mu]`.
///
/// Backward differentiates implicitly: with u = (ΦᵀΦ+μI)⁻¹g,
/// grad_w = μu, grad_y = Φu, grad_μ = ⟨u, w − x⟩.
pub struct GramSolve<S: Scalar> {
    model: DegradationModel<S>,
}

impl<S: Scalar> GramSolve<S> {
    pub fn new(model: DegradationModel<S>) -> Result<Arc<Self>> {
        if model.learnable {
            return Err(LorunError::Config(
                "HQS data solve requires a fixed operator; set the operator non-learnable".into(),
            ));
        }
        Ok(Arc::new(GramSolve { model }))
    }

    pub fn kind(&self) -> DegradationKind {
        self.model.kind()
    }
}

impl<S: Scalar> CustomOp<S> for GramSolve<S> {
    fn label(&self) -> &'static str {
        "gram-solve"
    }

    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if inputs.len() != 3 {
            return Err(LorunError::Contract(format!(
                "gram-solve expects [w, y, mu], got {} inputs",
                inputs.len()
            )));
        }
        let (w, y, mu) = (inputs[0], inputs[1], inputs[2]);
        let mu = mu.item()?.to_f64();
        let aty = self.model.adjoint(y)?;
        let rhs = aty.zip_map(w, |a, wi| a + S::from_f64(mu) * wi)?;
        self.model.solve_gram(&rhs, mu)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (w, _y, mu_t) = (inputs[0], inputs[1], inputs[2]);
        let mu = mu_t.item()?.to_f64();
        if !needs.iter().any(|&n| n) {
            return Ok(vec![None, None, None]);
        }
        let u = self.model.solve_gram(grad, mu)?;
        let gw = if needs[0] {
            Some(u.scale(S::from_f64(mu)))
        } else {
            None
        };
        let gy = if needs[1] {
            Some(self.model.forward(&u)?)
        } else {
            None
        };
        let gmu = if needs[2] {
            let diff = w.sub(output)?;
            Some(Tensor::scalar(S::from_f64(u.dot(&diff)?)))
        } else {
            None
        };
        Ok(vec![gw, gy, gmu])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::check_grad_sampled;
    use crate::graph::ComputeGraph;
    use crate::operators::{CassiParams, CsParams};
    use crate::rng::Rng;

    #[test]
    fn cs_forward_gradients_match_finite_differences() {
        let model = DegradationModel::cs(CsParams::<f64>::random(4, 0.5, 3).unwrap());
        let mut rng = Rng::new(17);
        let x0 = Tensor::<f64>::randn(&[1, 4, 4], 1.0, &mut rng);
        let m0 = model.param_tensor().clone();

        let mut g = ComputeGraph::new();
        let x = g.leaf("x", x0.clone(), true).unwrap();
        let m = g.leaf("m", m0.clone(), true).unwrap();
        let y = g.custom(OperatorForward::new(&model), &[x, m]).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();

        let f_x = |xt: &Tensor<f64>| {
            let y = cs::forward(xt, &m0, 4).unwrap();
            y.data().iter().map(|v| v * v).sum::<f64>()
        };
        let err = check_grad_sampled(&f_x, &x0, &grads["x"], 1e-6, 16, 1);
        assert!(err < 1e-6, "cs forward grad x err {err}");

        let f_m = |mt: &Tensor<f64>| {
            let y = cs::forward(&x0, mt, 4).unwrap();
            y.data().iter().map(|v| v * v).sum::<f64>()
        };
        let err = check_grad_sampled(&f_m, &m0, &grads["m"], 1e-6, 24, 2);
        assert!(err < 1e-6, "cs forward grad matrix err {err}");
    }

    #[test]
    fn cassi_adjoint_gradients_match_finite_differences() {
        let params = CassiParams::<f64>::random_binary(4, 4, 3, 1, 5).unwrap();
        let model = DegradationModel::cassi(params);
        let mut rng = Rng::new(23);
        let y0 = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let mask0 = model.param_tensor().clone();

        let mut g = ComputeGraph::new();
        let y = g.leaf("y", y0.clone(), true).unwrap();
        let m = g.leaf("m", mask0.clone(), true).unwrap();
        let x = g.custom(OperatorAdjoint::new(&model), &[y, m]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();

        let f_y = |yt: &Tensor<f64>| {
            let x = cassi::adjoint(yt, &mask0, 1, 3).unwrap();
            x.data().iter().map(|v| v * v).sum::<f64>()
        };
        let err = check_grad_sampled(&f_y, &y0, &grads["y"], 1e-6, 24, 3);
        assert!(err < 1e-6, "cassi adjoint grad y err {err}");

        let f_m = |mt: &Tensor<f64>| {
            let x = cassi::adjoint(&y0, mt, 1, 3).unwrap();
            x.data().iter().map(|v| v * v).sum::<f64>()
        };
        let err = check_grad_sampled(&f_m, &mask0, &grads["m"], 1e-6, 16, 4);
        assert!(err < 1e-6, "cassi adjoint grad mask err {err}");
    }

    #[test]
    fn gram_solve_gradients_match_finite_differences() {
        let params = CassiParams::<f64>::random_binary(4, 4, 3, 1, 9).unwrap();
        let model = DegradationModel::cassi(params);
        let solve = GramSolve::new(model.clone()).unwrap();
        let mut rng = Rng::new(31);
        let w0 = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let y0 = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let mu0 = Tensor::scalar(0.7f64);

        let mut g = ComputeGraph::new();
        let w = g.leaf("w", w0.clone(), true).unwrap();
        let y = g.leaf("y", y0.clone(), true).unwrap();
        let mu = g.leaf("mu", mu0.clone(), true).unwrap();
        let x = g.custom(solve.clone(), &[w, y, mu]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();

        let run = |wt: &Tensor<f64>, yt: &Tensor<f64>, mut_: f64| {
            let rhs = model
                .adjoint(yt)
                .unwrap()
                .zip_map(wt, |a, wi| a + mut_ * wi)
                .unwrap();
            let x = model.solve_gram(&rhs, mut_).unwrap();
            x.data().iter().map(|v| v * v).sum::<f64>()
        };

        let f_w = |wt: &Tensor<f64>| run(wt, &y0, 0.7);
        let err = check_grad_sampled(&f_w, &w0, &grads["w"], 1e-6, 16, 5);
        assert!(err < 1e-5, "gram solve grad w err {err}");

        let f_y = |yt: &Tensor<f64>| run(&w0, yt, 0.7);
        let err = check_grad_sampled(&f_y, &y0, &grads["y"], 1e-6, 16, 6);
        assert!(err < 1e-5, "gram solve grad y err {err}");

        let f_mu = |mt: &Tensor<f64>| run(&w0, &y0, mt.item().unwrap());
        let err = check_grad_sampled(&f_mu, &mu0, &grads["mu"], 1e-6, 1, 7);
        assert!(err < 1e-5, "gram solve grad mu err {err}");
    }

    #[test]
    fn gram_solve_rejects_learnable_operator() {
        let model = DegradationModel::cs(CsParams::<f64>::random(4, 0.5, 3).unwrap());
        assert!(GramSolve::new(model).is_err());
    }
}
