//! Small U-Net: double-conv encoder levels joined by strided decimation,
//! nearest-neighbor upsampling with a conv, and skip concatenations.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{ComputeGraph, NodeId, Padding};
use crate::tensor::Scalar;

use super::{weight_node, DenoiserConfig};

fn ch(config: &DenoiserConfig, level: usize) -> usize {
    config.base_channels << level
}

pub fn weight_shapes(config: &DenoiserConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let cin = config.image_channels + 1; // + noise channel
    let mut push_dconv = |name: &str, c_in: usize, c_out: usize, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{name}.c1.w"), vec![c_out, c_in, 3, 3]));
        out.push((format!("{name}.c1.b"), vec![c_out]));
        out.push((format!("{name}.c2.w"), vec![c_out, c_out, 3, 3]));
        out.push((format!("{name}.c2.b"), vec![c_out]));
    };
    push_dconv("unet.enc0", cin, ch(config, 0), &mut out);
    for l in 1..=config.depth {
        push_dconv(&format!("unet.enc{l}"), ch(config, l - 1), ch(config, l), &mut out);
    }
    for l in (1..=config.depth).rev() {
        out.push((format!("unet.up{l}.w"), vec![ch(config, l - 1), ch(config, l), 3, 3]));
        out.push((format!("unet.up{l}.b"), vec![ch(config, l - 1)]));
        // decoder sees skip + upsampled: 2 x ch(l-1)
        push_dconv(&format!("unet.dec{l}"), 2 * ch(config, l - 1), ch(config, l - 1), &mut out);
    }
    out.push(("unet.out.w".to_string(), vec![config.image_channels, ch(config, 0), 3, 3]));
    out.push(("unet.out.b".to_string(), vec![config.image_channels]));
    out
}

fn dconv<S: Scalar>(
    g: &mut ComputeGraph<S>,
    weights: &BTreeMap<String, NodeId>,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w1 = weight_node(weights, &format!("{name}.c1.w"))?;
    let b1 = weight_node(weights, &format!("{name}.c1.b"))?;
    let h = g.conv2d(x, w1, Padding::Zero)?;
    let h = g.bias_add(h, b1, 0)?;
    let h = g.relu(h);
    let w2 = weight_node(weights, &format!("{name}.c2.w"))?;
    let b2 = weight_node(weights, &format!("{name}.c2.b"))?;
    let h = g.conv2d(h, w2, Padding::Zero)?;
    let h = g.bias_add(h, b2, 0)?;
    Ok(g.relu(h))
}

pub fn forward<S: Scalar>(
    g: &mut ComputeGraph<S>,
    config: &DenoiserConfig,
    weights: &BTreeMap<String, NodeId>,
    z: NodeId,
    noise_level: NodeId,
) -> Result<NodeId> {
    let shape = g.value(z).shape().to_vec();
    let noise_ch = g.fill_like(noise_level, &[1, shape[1], shape[2]])?;
    let x = g.concat(&[z, noise_ch], 0)?;

    let mut skips = Vec::with_capacity(config.depth);
    let mut h = dconv(g, weights, "unet.enc0", x)?;
    for l in 1..=config.depth {
        skips.push(h);
        let down = g.downsample_stride(h, 2)?;
        h = dconv(g, weights, &format!("unet.enc{l}"), down)?;
    }
    for l in (1..=config.depth).rev() {
        let up = g.upsample_nearest(h, 2)?;
        let wu = weight_node(weights, &format!("unet.up{l}.w"))?;
        let bu = weight_node(weights, &format!("unet.up{l}.b"))?;
        let up = g.conv2d(up, wu, Padding::Zero)?;
        let up = g.bias_add(up, bu, 0)?;
        let skip = skips.pop().expect("one skip per level");
        let cat = g.concat(&[up, skip], 0)?;
        h = dconv(g, weights, &format!("unet.dec{l}"), cat)?;
    }
    let wo = weight_node(weights, "unet.out.w")?;
    let bo = weight_node(weights, "unet.out.b")?;
    let out = g.conv2d(h, wo, Padding::Zero)?;
    g.bias_add(out, bo, 0)
}
