//! Proximal-mapping denoisers.
//!
//! Two small learned architectures (a U-Net and a per-pixel-token
//! Transformer) plus the classical soft-thresholding prox. The stage noise
//! level √(ρλ) (PGD) or √(λ/μ) (HQS) conditions the learned denoisers as an
//! appended constant-valued input channel.

pub mod transformer;
pub mod unet;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{LorunError, Result};
use crate::graph::{ComputeGraph, CustomOp, NodeId};
use crate::lora::LoraAdapter;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Unet,
    Transformer,
    SoftThreshold,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::Transformer => "transformer",
            Arch::SoftThreshold => "soft_threshold",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Arch::Unet),
            "transformer" => Ok(Arch::Transformer),
            "soft_threshold" => Ok(Arch::SoftThreshold),
            other => Err(LorunError::Config(format!("unknown denoiser arch {other}"))),
        }
    }
}

/// Fully determines every weight shape of a denoiser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub arch: Arch,
    pub base_channels: usize,
    pub depth: usize,
    /// Attention heads (transformer only).
    pub heads: usize,
    pub image_channels: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arch == Arch::SoftThreshold {
            return Ok(());
        }
        if self.depth < 1 {
            return Err(LorunError::Config("denoiser depth must be >= 1".into()));
        }
        if self.base_channels < 4 {
            return Err(LorunError::Config("base_channels must be >= 4".into()));
        }
        if self.image_channels < 1 {
            return Err(LorunError::Config("image_channels must be >= 1".into()));
        }
        if self.arch == Arch::Transformer {
            if self.heads < 1 {
                return Err(LorunError::Config("heads must be >= 1".into()));
            }
            if self.base_channels % self.heads != 0 {
                return Err(LorunError::Config(format!(
                    "base_channels {} must divide into {} heads",
                    self.base_channels, self.heads
                )));
            }
        }
        Ok(())
    }

    /// Deterministically ordered weight names and shapes.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self.arch {
            Arch::Unet => unet::weight_shapes(self),
            Arch::Transformer => transformer::weight_shapes(self),
            Arch::SoftThreshold => Vec::new(),
        }
    }

    /// Spatial divisibility the architecture requires.
    pub fn spatial_multiple(&self) -> usize {
        match self.arch {
            Arch::SoftThreshold => 1,
            _ => 1 << self.depth,
        }
    }
}

/// Named weight tensors; either fully trainable or fully frozen.
#[derive(Debug, Clone)]
pub struct DenoiserWeights<S> {
    pub tensors: BTreeMap<String, Tensor<S>>,
    pub frozen: bool,
}

impl<S: Scalar> DenoiserWeights<S> {
    /// He-style initialization for every conv/linear weight, zero biases.
    pub fn init(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.weight_shapes() {
            let mut rng = Rng::for_purpose(seed, &format!("weights:{name}"));
            let t = match shape.as_slice() {
                [c_out, c_in, k, _] => {
                    let fan_in = c_in * k * k;
                    let _ = c_out;
                    Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                }
                [n_in, _n_out] => Tensor::randn(&shape, (2.0 / *n_in as f64).sqrt(), &mut rng),
                _ => Tensor::zeros(&shape),
            };
            tensors.insert(name, t);
        }
        Ok(DenoiserWeights {
            tensors,
            frozen: false,
        })
    }

    pub fn check_matches(&self, config: &DenoiserConfig) -> Result<()> {
        let expect = config.weight_shapes();
        if expect.len() != self.tensors.len() {
            return Err(LorunError::Config(format!(
                "weight set has {} tensors, config expects {}",
                self.tensors.len(),
                expect.len()
            )));
        }
        for (name, shape) in &expect {
            match self.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(LorunError::Dimension(format!(
                        "weight {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(LorunError::Config(format!(
                        "weight set is missing tensor {name}"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<T: Scalar>(&self) -> DenoiserWeights<T> {
        DenoiserWeights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen,
        }
    }
}

/// `sign(z) · max(0, |z| − τ)` — the exact prox of τ‖·‖₁.
pub fn soft_threshold<S: Scalar>(z: &Tensor<S>, tau: f64) -> Result<Tensor<S>> {
    if tau < 0.0 {
        return Err(LorunError::Config(format!(
            "soft threshold must be nonnegative, got {tau}"
        )));
    }
    let t = S::from_f64(tau);
    Ok(z.map(|v| {
        let m = v.abs() - t;
        if m > S::ZERO {
            if v > S::ZERO {
                m
            } else {
                -m
            }
        } else {
            S::ZERO
        }
    }))
}

/// Graph form of soft thresholding with inputs `[z, tau]`; subgradients on
/// the active set flow to both the signal and the threshold.
pub struct SoftThresholdOp;

impl<S: Scalar> CustomOp<S> for SoftThresholdOp {
    fn label(&self) -> &'static str {
        "soft-threshold"
    }

    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let (z, tau) = (inputs[0], inputs[1]);
        let tau = tau.item()?.to_f64();
        soft_threshold(z, tau)
    }

    fn vjp(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let (z, tau) = (inputs[0], inputs[1]);
        let t = S::from_f64(tau.item()?.to_f64());
        let gz = if needs[0] {
            Some(grad.zip_map(z, |g, zi| if zi.abs() > t { g } else { S::ZERO })?)
        } else {
            None
        };
        let gt = if needs[1] {
            let mut acc = S::ZERO;
            for (&g, &zi) in grad.data().iter().zip(z.data()) {
                if zi > t {
                    acc += -g;
                } else if zi < -t {
                    acc += g;
                }
            }
            Some(Tensor::scalar(acc))
        } else {
            None
        };
        Ok(vec![gz, gt])
    }
}

/// Build the denoiser forward pass in a graph.
///
/// `weights` maps each config weight name to its (possibly
/// adapter-effective) node. `noise_level` is a 1-element node; it enters as
/// an appended constant channel, so its gradient reaches the stage scalars.
pub fn denoise_node<S: Scalar>(
    g: &mut ComputeGraph<S>,
    config: &DenoiserConfig,
    weights: &BTreeMap<String, NodeId>,
    z: NodeId,
    noise_level: NodeId,
) -> Result<NodeId> {
    let shape = g.value(z).shape().to_vec();
    if shape.len() != 3 {
        return Err(LorunError::Dimension(format!(
            "denoiser input must be [C,H,W], got {shape:?}"
        )));
    }
    if shape[0] != config.image_channels {
        return Err(LorunError::Dimension(format!(
            "denoiser input has {} channels, config expects {}",
            shape[0], config.image_channels
        )));
    }
    let mult = config.spatial_multiple();
    if shape[1] % mult != 0 || shape[2] % mult != 0 {
        return Err(LorunError::Dimension(format!(
            "spatial dims {}x{} must be divisible by {mult}",
            shape[1], shape[2]
        )));
    }
    match config.arch {
        Arch::Unet => unet::forward(g, config, weights, z, noise_level),
        Arch::Transformer => transformer::forward(g, config, weights, z, noise_level),
        Arch::SoftThreshold => {
            // threshold τ = (noise level)² = ρλ
            let tau = g.mul(noise_level, noise_level)?;
            g.custom(Arc::new(SoftThresholdOp), &[z, tau])
        }
    }
}

/// Convenience: run a denoiser outside any training graph.
///
/// With adapters present every targeted weight is used in its effective
/// (W0 + ΔW) form.
pub fn denoise<S: Scalar>(
    config: &DenoiserConfig,
    weights: &DenoiserWeights<S>,
    adapters: Option<&[LoraAdapter<S>]>,
    z: &Tensor<S>,
    noise_level: f64,
) -> Result<Tensor<S>> {
    if noise_level < 0.0 {
        return Err(LorunError::Config(format!(
            "noise level must be nonnegative, got {noise_level}"
        )));
    }
    weights.check_matches(config)?;
    let mut g = ComputeGraph::new();
    let mut nodes = BTreeMap::new();
    for (name, t) in &weights.tensors {
        let mut node = g.constant(t.clone());
        if let Some(ads) = adapters {
            if let Some(ad) = ads.iter().find(|a| &a.target == name) {
                let a = g.constant(ad.a.clone());
                let b = g.constant(ad.b.clone());
                node = ad.effective_weight_node(&mut g, node, a, b)?;
            }
        }
        nodes.insert(name.clone(), node);
    }
    let zn = g.constant(z.clone());
    let nl = g.constant(Tensor::scalar(S::from_f64(noise_level)));
    let out = denoise_node(&mut g, config, &nodes, zn, nl)?;
    Ok(g.value(out).clone())
}

/// Fetch a weight node by name, failing loudly on a config mismatch.
pub(crate) fn weight_node(
    weights: &BTreeMap<String, NodeId>,
    name: &str,
) -> Result<NodeId> {
    weights.get(name).copied().ok_or_else(|| {
        LorunError::Config(format!("weight map is missing tensor {name}"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{check_grad_sampled, fd_gradient, rel_err};

    fn unet_cfg() -> DenoiserConfig {
        DenoiserConfig {
            arch: Arch::Unet,
            base_channels: 8,
            depth: 2,
            heads: 1,
            image_channels: 1,
        }
    }

    fn tf_cfg() -> DenoiserConfig {
        DenoiserConfig {
            arch: Arch::Transformer,
            base_channels: 8,
            depth: 1,
            heads: 2,
            image_channels: 1,
        }
    }

    #[test]
    fn soft_threshold_examples() {
        let z = Tensor::from_vec(vec![2], vec![0.5f64, -0.1]).unwrap();
        let out = soft_threshold(&z, 0.2).unwrap();
        assert!((out.data()[0] - 0.3).abs() < 1e-15);
        assert_eq!(out.data()[1], 0.0);
        assert!(soft_threshold(&z, -0.5).is_err());
    }

    #[test]
    fn soft_threshold_is_odd_and_nonexpansive() {
        let mut rng = Rng::new(3);
        for _ in 0..200 {
            let z = rng.uniform_in(-3.0, 3.0);
            let w = rng.uniform_in(-3.0, 3.0);
            let tau = rng.uniform_in(0.0, 2.0);
            let zt = Tensor::scalar(z);
            let wt = Tensor::scalar(w);
            let f = soft_threshold(&zt, tau).unwrap().item().unwrap();
            let fneg = soft_threshold(&zt.scale(-1.0), tau).unwrap().item().unwrap();
            assert!((f + fneg).abs() < 1e-15, "odd symmetry");
            let fw = soft_threshold(&wt, tau).unwrap().item().unwrap();
            assert!((f - fw).abs() <= (z - w).abs() + 1e-15, "1-Lipschitz");
        }
    }

    #[test]
    fn soft_threshold_matches_grid_prox_oracle() {
        // argmin over a fine grid of ½(x−z)² + τ|x|
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let z = rng.uniform_in(-2.0, 2.0);
            let tau = rng.uniform_in(0.0, 1.5);
            let out = soft_threshold(&Tensor::scalar(z), tau).unwrap().item().unwrap();
            let grid = 4001;
            let mut best = (f64::INFINITY, 0.0);
            for i in 0..grid {
                let x = -2.5 + 5.0 * i as f64 / (grid - 1) as f64;
                let obj = 0.5 * (x - z) * (x - z) + tau * x.abs();
                if obj < best.0 {
                    best = (obj, x);
                }
            }
            let res = 5.0 / (grid - 1) as f64;
            assert!(
                (out - best.1).abs() <= res,
                "z={z} tau={tau} prox={out} grid={}",
                best.1
            );
        }
    }

    #[test]
    fn unet_shape_preserving_and_matches_weight_list() {
        let cfg = unet_cfg();
        let w = DenoiserWeights::<f64>::init(&cfg, 1).unwrap();
        for (h, wd) in [(8usize, 8usize), (16, 12), (32, 32)] {
            let z = Tensor::full(&[1, h, wd], 0.3);
            let out = denoise(&cfg, &w, None, &z, 0.1).unwrap();
            assert_eq!(out.shape(), z.shape());
        }
        // indivisible spatial dims are rejected
        let z = Tensor::<f64>::zeros(&[1, 10, 10]);
        assert!(denoise(&cfg, &w, None, &z, 0.1).is_err());
        // wrong channel count rejected
        let z = Tensor::<f64>::zeros(&[3, 8, 8]);
        assert!(denoise(&cfg, &w, None, &z, 0.1).is_err());
        // negative noise rejected
        let z = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert!(denoise(&cfg, &w, None, &z, -0.1).is_err());
    }

    #[test]
    fn transformer_shape_preserving_multichannel() {
        let mut cfg = tf_cfg();
        cfg.image_channels = 3;
        let w = DenoiserWeights::<f64>::init(&cfg, 2).unwrap();
        let z = Tensor::full(&[3, 8, 6], 0.2);
        let out = denoise(&cfg, &w, None, &z, 0.05).unwrap();
        assert_eq!(out.shape(), z.shape());
    }

    #[test]
    fn zero_init_adapters_leave_output_unchanged() {
        for cfg in [unet_cfg(), tf_cfg()] {
            let w = DenoiserWeights::<f64>::init(&cfg, 3).unwrap();
            let adapters: Vec<LoraAdapter<f64>> = cfg
                .weight_shapes()
                .iter()
                .filter(|(_, s)| s.len() == 2 || s.len() == 4)
                .map(|(n, s)| LoraAdapter::init(n, s, 1, 5).unwrap())
                .collect();
            let z = Tensor::full(&[1, 8, 8], 0.4);
            let bare = denoise(&cfg, &w, None, &z, 0.1).unwrap();
            let adapted = denoise(&cfg, &w, Some(&adapters), &z, 0.1).unwrap();
            assert_eq!(bare.data(), adapted.data(), "{:?}", cfg.arch);
        }
    }

    #[test]
    fn denoiser_weight_gradient_matches_finite_differences() {
        for cfg in [
            DenoiserConfig {
                arch: Arch::Unet,
                base_channels: 4,
                depth: 1,
                heads: 1,
                image_channels: 1,
            },
            DenoiserConfig {
                arch: Arch::Transformer,
                base_channels: 4,
                depth: 1,
                heads: 2,
                image_channels: 1,
            },
        ] {
            let weights = DenoiserWeights::<f64>::init(&cfg, 4).unwrap();
            let mut rng = Rng::new(8);
            let z0 = Tensor::<f64>::randn(&[1, 4, 4], 0.5, &mut rng);
            let target = Tensor::<f64>::randn(&[1, 4, 4], 0.5, &mut rng);

            // pick one conv weight to probe
            let probe = cfg
                .weight_shapes()
                .iter()
                .find(|(_, s)| s.len() == 4)
                .map(|(n, _)| n.clone());
            let probe = match probe {
                Some(p) => p,
                None => cfg.weight_shapes()[0].0.clone(),
            };

            let loss_for = |wt: &Tensor<f64>| {
                let mut ws = weights.clone();
                ws.tensors.insert(probe.clone(), wt.clone());
                let out = denoise(&cfg, &ws, None, &z0, 0.1).unwrap();
                out.sub(&target)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|d| d * d)
                    .sum::<f64>()
            };

            // analytic gradient through a training-style graph
            let mut g = ComputeGraph::new();
            let mut nodes = BTreeMap::new();
            for (name, t) in &weights.tensors {
                let node = g.leaf(name, t.clone(), name == &probe).unwrap();
                nodes.insert(name.clone(), node);
            }
            let zn = g.constant(z0.clone());
            let nl = g.constant(Tensor::scalar(0.1));
            let out = denoise_node(&mut g, &cfg, &nodes, zn, nl).unwrap();
            let tgt = g.constant(target.clone());
            let diff = g.sub(out, tgt).unwrap();
            let sq = g.mul(diff, diff).unwrap();
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();

            let err = check_grad_sampled(
                &loss_for,
                &weights.tensors[&probe],
                &grads[&probe],
                1e-6,
                10,
                9,
            );
            assert!(err < 1e-4, "{:?} denoiser grad err {err}", cfg.arch);
        }
    }

    #[test]
    fn soft_threshold_graph_gradients() {
        let mut rng = Rng::new(10);
        let z0 = Tensor::<f64>::randn(&[12], 1.0, &mut rng);
        let tau0 = Tensor::scalar(0.4f64);
        let mut g = ComputeGraph::new();
        let z = g.leaf("z", z0.clone(), true).unwrap();
        let tau = g.leaf("tau", tau0.clone(), true).unwrap();
        let out = g.custom(Arc::new(SoftThresholdOp), &[z, tau]).unwrap();
        let sq = g.mul(out, out).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();

        let fz = |zt: &Tensor<f64>| {
            let o = soft_threshold(zt, 0.4).unwrap();
            o.data().iter().map(|v| v * v).sum::<f64>()
        };
        let fd = fd_gradient(&fz, &z0, 1e-7);
        for i in 0..z0.numel() {
            // skip coordinates within FD reach of the kink
            if (z0.data()[i].abs() - 0.4).abs() < 1e-6 {
                continue;
            }
            assert!(rel_err(grads["z"].data()[i], fd.data()[i]) < 1e-5);
        }

        let ft = |tt: &Tensor<f64>| {
            let o = soft_threshold(&z0, tt.item().unwrap()).unwrap();
            o.data().iter().map(|v| v * v).sum::<f64>()
        };
        let err = check_grad_sampled(&ft, &tau0, &grads["tau"], 1e-7, 1, 11);
        assert!(err < 1e-5, "tau grad err {err}");
    }

    #[test]
    fn transformer_attention_rows_sum_to_one() {
        let cfg = tf_cfg();
        let w = DenoiserWeights::<f64>::init(&cfg, 6).unwrap();
        let mut rng = Rng::new(12);
        let z = Tensor::<f64>::randn(&[1, 8, 8], 1.0, &mut rng);

        let mut g = ComputeGraph::new();
        let mut nodes = BTreeMap::new();
        for (name, t) in &w.tensors {
            nodes.insert(name.clone(), g.constant(t.clone()));
        }
        let zn = g.constant(z);
        let nl = g.constant(Tensor::scalar(0.1));
        let (_, probes) = transformer::forward_with_probes(&mut g, &cfg, &nodes, zn, nl).unwrap();
        for attn in probes.attention {
            let a = g.value(attn);
            let n = a.shape()[1];
            for row in a.data().chunks(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }
}
