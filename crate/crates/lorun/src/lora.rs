//! Low-rank adapters: the rank rule, initialization, effective-weight
//! computation, merging, and parameter accounting.
//!
//! An adapter is a factor pair (A, B) attached to one named weight. A
//! starts at zero and B Gaussian, so ΔW = AB is exactly zero at
//! initialization and a freshly adapted model equals its backbone.
//! Convolution weights `[C_out, C_in, k, k]` are adapted through the
//! reshaped factorization A `[C_out·k, r·k]`, B `[r·k, C_in·k]`.

use crate::error::{LorunError, Result};
use crate::graph::{ComputeGraph, NodeId};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the Gaussian factor at initialization.
pub const INIT_STD: f64 = 0.02;

/// `r = ⌈min(in_dim, out_dim) · γ / 100⌉`.
pub fn rank_for(in_dim: usize, out_dim: usize, gamma: f64) -> Result<usize> {
    if in_dim == 0 || out_dim == 0 {
        return Err(LorunError::Config("adapter dims must be >= 1".into()));
    }
    if gamma <= 0.0 {
        return Err(LorunError::Config(format!(
            "rank factor gamma must be positive, got {gamma}"
        )));
    }
    let r = (in_dim.min(out_dim) as f64 * gamma / 100.0).ceil() as usize;
    Ok(r.max(1))
}

/// Dimensions of a convolution target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

/// Factor pair attached to one named weight.
#[derive(Debug, Clone)]
pub struct LoraAdapter<S> {
    pub target: String,
    pub a: Tensor<S>,
    pub b: Tensor<S>,
    pub rank: usize,
    /// Present when the target is a convolution weight.
    pub conv: Option<ConvDims>,
}

impl<S: Scalar> LoraAdapter<S> {
    /// Build a zero-ΔW adapter for a linear `[n1, n2]` or convolution
    /// `[C_out, C_in, k, k]` weight. A = 0, B ~ N(0, 0.02²).
    pub fn init(target: &str, weight_shape: &[usize], rank: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::for_purpose(seed, &format!("lora-init:{target}"));
        match weight_shape {
            [n1, n2] => {
                check_rank(rank, *n1, *n2)?;
                Ok(LoraAdapter {
                    target: target.to_string(),
                    a: Tensor::zeros(&[*n1, rank]),
                    b: Tensor::randn(&[rank, *n2], INIT_STD, &mut rng),
                    rank,
                    conv: None,
                })
            }
            [c_out, c_in, k, k2] if k == k2 => {
                check_rank(rank, *c_in, *c_out)?;
                Ok(LoraAdapter {
                    target: target.to_string(),
                    a: Tensor::zeros(&[c_out * k, rank * k]),
                    b: Tensor::randn(&[rank * k, c_in * k], INIT_STD, &mut rng),
                    rank,
                    conv: Some(ConvDims {
                        c_out: *c_out,
                        c_in: *c_in,
                        k: *k,
                    }),
                })
            }
            other => Err(LorunError::Dimension(format!(
                "adapters attach to [n1,n2] or [C_out,C_in,k,k] weights, got {other:?}"
            ))),
        }
    }

    /// Rebuild from stored factors, recovering rank and conv dims.
    pub fn from_factors(
        target: &str,
        a: Tensor<S>,
        b: Tensor<S>,
        weight_shape: &[usize],
    ) -> Result<Self> {
        match weight_shape {
            [n1, n2] => {
                let rank = a.shape()[1];
                if a.shape() != [*n1, rank] || b.shape() != [rank, *n2] {
                    return Err(LorunError::Dimension(format!(
                        "factors {:?}/{:?} do not fit weight [{n1}, {n2}]",
                        a.shape(),
                        b.shape()
                    )));
                }
                Ok(LoraAdapter {
                    target: target.to_string(),
                    a,
                    b,
                    rank,
                    conv: None,
                })
            }
            [c_out, c_in, k, k2] if k == k2 => {
                if a.shape()[0] != c_out * k || a.shape()[1] % k != 0 {
                    return Err(LorunError::Dimension(format!(
                        "conv factor A {:?} does not fit weight {weight_shape:?}",
                        a.shape()
                    )));
                }
                let rank = a.shape()[1] / k;
                if b.shape() != [rank * k, c_in * k] {
                    return Err(LorunError::Dimension(format!(
                        "conv factor B {:?} does not fit weight {weight_shape:?}",
                        b.shape()
                    )));
                }
                Ok(LoraAdapter {
                    target: target.to_string(),
                    a,
                    b,
                    rank,
                    conv: Some(ConvDims {
                        c_out: *c_out,
                        c_in: *c_in,
                        k: *k,
                    }),
                })
            }
            other => Err(LorunError::Dimension(format!(
                "unsupported adapter weight shape {other:?}"
            ))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Materialize ΔW in the target weight's shape.
    pub fn delta_w(&self) -> Result<Tensor<S>> {
        let prod = crate::graph::matmul(&self.a, &self.b)?;
        match self.conv {
            None => Ok(prod),
            Some(ConvDims { c_out, c_in, k }) => {
                // [C_out·k, C_in·k] rows interleave (c_out, k_row); regroup
                // to [C_out, C_in, k, k].
                let reshaped = prod.reshaped(vec![c_out, k, c_in, k])?;
                crate::graph::permute_fwd(&reshaped, &[0, 2, 1, 3])
            }
        }
    }

    /// W0 + ΔW as a plain tensor.
    pub fn merge(&self, w0: &Tensor<S>) -> Result<Tensor<S>> {
        w0.add(&self.delta_w()?)
    }

    /// Recover W0 from a merged weight.
    pub fn unmerge(&self, merged: &Tensor<S>) -> Result<Tensor<S>> {
        merged.sub(&self.delta_w()?)
    }

    /// Graph version of `W0 + ΔW`, differentiable w.r.t. the factor leaves.
    pub fn effective_weight_node(
        &self,
        g: &mut ComputeGraph<S>,
        w0: NodeId,
        a: NodeId,
        b: NodeId,
    ) -> Result<NodeId> {
        let prod = g.matmul(a, b)?;
        let delta = match self.conv {
            None => prod,
            Some(ConvDims { c_out, c_in, k }) => {
                let reshaped = g.reshape(prod, vec![c_out, k, c_in, k])?;
                g.permute(reshaped, vec![0, 2, 1, 3])?
            }
        };
        g.add(w0, delta)
    }
}

fn check_rank(rank: usize, d1: usize, d2: usize) -> Result<()> {
    if rank == 0 || rank > d1.min(d2) {
        return Err(LorunError::Config(format!(
            "rank {rank} out of range [1, {}]",
            d1.min(d2)
        )));
    }
    Ok(())
}

/// Parameter accounting for one denoiser description.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub backbone: usize,
    pub per_stage_lora: usize,
    pub block_k_equivalent: usize,
    pub ratio: f64,
    pub stages: usize,
    pub gamma: f64,
}

/// Count backbone vs adapter parameters for `stages` unfolding stages at
/// rank factor `gamma`. Only 2-D and 4-D weights receive adapters.
pub fn param_count(
    weight_shapes: &[(String, Vec<usize>)],
    stages: usize,
    gamma: f64,
) -> Result<ParamReport> {
    if stages == 0 {
        return Err(LorunError::Config("stage count must be >= 1".into()));
    }
    let mut backbone = 0usize;
    let mut lora = 0usize;
    for (_, shape) in weight_shapes {
        let numel: usize = shape.iter().product();
        backbone += numel;
        match shape.as_slice() {
            [n1, n2] => {
                let r = rank_for(*n1, *n2, gamma)?;
                lora += n1 * r + r * n2;
            }
            [c_out, c_in, k, _] => {
                let r = rank_for(*c_in, *c_out, gamma)?;
                lora += c_out * k * r * k + r * k * c_in * k;
            }
            _ => {}
        }
    }
    let block_k_equivalent = stages * backbone;
    Ok(ParamReport {
        backbone,
        per_stage_lora: lora,
        block_k_equivalent,
        ratio: (backbone + stages * lora) as f64 / block_k_equivalent as f64,
        stages,
        gamma,
    })
}
