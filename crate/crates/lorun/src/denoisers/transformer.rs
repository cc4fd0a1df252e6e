//! Patch-free Transformer denoiser: pixels at a decimated resolution become
//! tokens, one attention block (Q, K, V, projection) plus a gelu FFN, then
//! upsampling back. Attention and projection weights are the usual adapter
//! targets.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{ComputeGraph, NodeId, Padding};
use crate::tensor::Scalar;

use super::{weight_node, DenoiserConfig};

pub fn weight_shapes(config: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let f = config.base_channels;
    let cin = config.image_channels + 1;
    let mut out = vec![
        ("tf.embed.w".to_string(), vec![f, cin, 3, 3]),
        ("tf.embed.b".to_string(), vec![f]),
    ];
    for l in 0..config.depth {
        out.push((format!("tf.down{l}.w"), vec![f, f, 3, 3]));
        out.push((format!("tf.down{l}.b"), vec![f]));
    }
    for name in ["q", "k", "v", "proj"] {
        out.push((format!("tf.attn.{name}.w"), vec![f, f]));
    }
    out.push(("tf.ffn.f1.w".to_string(), vec![f, 2 * f]));
    out.push(("tf.ffn.f1.b".to_string(), vec![2 * f]));
    out.push(("tf.ffn.f2.w".to_string(), vec![2 * f, f]));
    out.push(("tf.ffn.f2.b".to_string(), vec![f]));
    for l in 0..config.depth {
        out.push((format!("tf.up{l}.w"), vec![f, f, 3, 3]));
        out.push((format!("tf.up{l}.b"), vec![f]));
    }
    out.push(("tf.out.w".to_string(), vec![config.image_channels, f, 3, 3]));
    out.push(("tf.out.b".to_string(), vec![config.image_channels]));
    out
}

/// Per-head attention maps surfaced for tests.
pub struct Probes {
    pub attention: Vec<NodeId>,
}

pub fn forward<S: Scalar>(
    g: &mut ComputeGraph<S>,
    config: &DenoiserConfig,
    weights: &BTreeMap<String, NodeId>,
    z: NodeId,
    noise_level: NodeId,
) -> Result<NodeId> {
    forward_with_probes(g, config, weights, z, noise_level).map(|(out, _)| out)
}

pub fn forward_with_probes<S: Scalar>(
    g: &mut ComputeGraph<S>,
    config: &DenoiserConfig,
    weights: &BTreeMap<String, NodeId>,
    z: NodeId,
    noise_level: NodeId,
) -> Result<(NodeId, Probes)> {
    let f = config.base_channels;
    let shape = g.value(z).shape().to_vec();
    let noise_ch = g.fill_like(noise_level, &[1, shape[1], shape[2]])?;
    let x = g.concat(&[z, noise_ch], 0)?;

    let we = weight_node(weights, "tf.embed.w")?;
    let be = weight_node(weights, "tf.embed.b")?;
    let mut h = g.conv2d(x, we, Padding::Zero)?;
    h = g.bias_add(h, be, 0)?;
    h = g.relu(h);

    for l in 0..config.depth {
        let down = g.downsample_stride(h, 2)?;
        let w = weight_node(weights, &format!("tf.down{l}.w"))?;
        let b = weight_node(weights, &format!("tf.down{l}.b"))?;
        h = g.conv2d(down, w, Padding::Zero)?;
        h = g.bias_add(h, b, 0)?;
        h = g.relu(h);
    }

    // tokens: [F, H', W'] -> [N, F]
    let hs = g.value(h).shape().to_vec();
    let (hh, ww) = (hs[1], hs[2]);
    let n_tokens = hh * ww;
    let flat = g.reshape(h, vec![f, n_tokens])?;
    let tokens = g.permute(flat, vec![1, 0])?;

    // attention block with pre-norm and residual
    let normed = g.layer_norm(tokens, 1)?;
    let wq = weight_node(weights, "tf.attn.q.w")?;
    let wk = weight_node(weights, "tf.attn.k.w")?;
    let wv = weight_node(weights, "tf.attn.v.w")?;
    let wp = weight_node(weights, "tf.attn.proj.w")?;
    let q = g.matmul(normed, wq)?;
    let k = g.matmul(normed, wk)?;
    let v = g.matmul(normed, wv)?;

    let d_head = f / config.heads;
    let scale = S::from_f64(1.0 / (d_head as f64).sqrt());
    let mut head_outs = Vec::with_capacity(config.heads);
    let mut attn_probes = Vec::with_capacity(config.heads);
    for hd in 0..config.heads {
        let qs = g.slice(q, 1, hd * d_head, d_head)?;
        let ks = g.slice(k, 1, hd * d_head, d_head)?;
        let vs = g.slice(v, 1, hd * d_head, d_head)?;
        let kst = g.transpose(ks)?;
        let scores = g.matmul(qs, kst)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1)?;
        attn_probes.push(attn);
        head_outs.push(g.matmul(attn, vs)?);
    }
    let merged = if head_outs.len() == 1 {
        head_outs[0]
    } else {
        g.concat(&head_outs, 1)?
    };
    let projected = g.matmul(merged, wp)?;
    let tokens = g.add(tokens, projected)?;

    // FFN block with pre-norm and residual
    let normed = g.layer_norm(tokens, 1)?;
    let w1 = weight_node(weights, "tf.ffn.f1.w")?;
    let b1 = weight_node(weights, "tf.ffn.f1.b")?;
    let w2 = weight_node(weights, "tf.ffn.f2.w")?;
    let b2 = weight_node(weights, "tf.ffn.f2.b")?;
    let ff = g.matmul(normed, w1)?;
    let ff = g.bias_add(ff, b1, 1)?;
    let ff = g.gelu(ff);
    let ff = g.matmul(ff, w2)?;
    let ff = g.bias_add(ff, b2, 1)?;
    let tokens = g.add(tokens, ff)?;

    // back to the image grid
    let grid = g.permute(tokens, vec![1, 0])?;
    let mut h = g.reshape(grid, vec![f, hh, ww])?;
    for l in 0..config.depth {
        let up = g.upsample_nearest(h, 2)?;
        let w = weight_node(weights, &format!("tf.up{l}.w"))?;
        let b = weight_node(weights, &format!("tf.up{l}.b"))?;
        h = g.conv2d(up, w, Padding::Zero)?;
        h = g.bias_add(h, b, 0)?;
        h = g.relu(h);
    }
    let wo = weight_node(weights, "tf.out.w")?;
    let bo = weight_node(weights, "tf.out.b")?;
    let out = g.conv2d(h, wo, Padding::Zero)?;
    let out = g.bias_add(out, bo, 0)?;
    Ok((
        out,
        Probes {
            attention: attn_probes,
        },
    ))
}
