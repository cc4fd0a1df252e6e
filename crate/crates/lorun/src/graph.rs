//! Reverse-mode automatic differentiation on an eager tape.
//!
//! A [`ComputeGraph`] records primitive ops in construction order, which is
//! already topological: node inputs always precede the node. Values are
//! computed eagerly as the graph is built; [`ComputeGraph::backward`] then
//! sweeps the tape once in reverse, accumulating vector-Jacobian products
//! only into subgraphs that can reach a trainable leaf. Frozen leaves never
//! receive a gradient and are absent from the returned map.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{LorunError, Result};
use crate::tensor::{strides, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Boundary handling for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Circular,
}

/// A differentiable operation supplied from outside the core op set.
///
/// Linear degradation operators plug in through this trait so their forward
/// and adjoint stay in one place while still participating in backprop.
pub trait CustomOp<S: Scalar>: Send + Sync {
    fn label(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<S>]) -> Result<Tensor<S>>;
    /// One cotangent per input, aligned with `inputs`. `needs[i]` is false
    /// when input `i` cannot reach a trainable leaf; the op may return
    /// `None` there and skip the work.
    fn vjp(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        grad: &Tensor<S>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<S>>>>;
}

enum Op<S: Scalar> {
    Leaf,
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        padding: Padding,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    BiasAdd {
        x: NodeId,
        b: NodeId,
        axis: usize,
    },
    Scale(NodeId, S),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Softplus(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        axis: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    UpsampleNearest {
        x: NodeId,
        factor: usize,
    },
    DownsampleStride {
        x: NodeId,
        factor: usize,
    },
    Reshape(NodeId),
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    FillLike(NodeId),
    Custom {
        op: Arc<dyn CustomOp<S>>,
        xs: Vec<NodeId>,
    },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
    trainable_leaf: bool,
}

pub struct ComputeGraph<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// Named leaves in insertion order.
    params: Vec<(String, NodeId)>,
}

impl<S: Scalar> Default for ComputeGraph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ComputeGraph<S> {
    pub fn new() -> Self {
        ComputeGraph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            trainable_leaf: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Named leaf tensor; `trainable` decides whether backward reports it.
    pub fn leaf(&mut self, name: &str, value: Tensor<S>, trainable: bool) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(LorunError::Contract(format!("duplicate leaf name {name}")));
        }
        let id = self.push(Op::Leaf, value, trainable);
        self.nodes[id.0].trainable_leaf = trainable;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// Anonymous constant input.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let vb = self.value(b);
        let value = matmul(va, vb)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, padding: Padding) -> Result<NodeId> {
        let value = conv2d_fwd(self.value(x), self.value(w), padding)?;
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Op::Conv2d { x, w, padding }, value, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Div(a, b), value, ng))
    }

    /// Add a length-`shape[axis]` vector along `axis`, broadcast elsewhere.
    pub fn bias_add(&mut self, x: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let vb = self.value(b);
        if axis >= vx.ndim() {
            return Err(LorunError::Dimension(format!(
                "bias axis {axis} out of range for shape {:?}",
                vx.shape()
            )));
        }
        if vb.ndim() != 1 || vb.shape()[0] != vx.shape()[axis] {
            return Err(LorunError::Dimension(format!(
                "bias shape {:?} does not match axis {axis} of {:?}",
                vb.shape(),
                vx.shape()
            )));
        }
        let (outer, len, inner) = axis_split(vx.shape(), axis);
        let mut out = vx.data().to_vec();
        let bd = vb.data();
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[base + i] += bd[j];
                }
            }
        }
        let value = Tensor::from_vec(vx.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(Op::BiasAdd { x, b, axis }, value, ng))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.value(x).scale(c);
        let ng = self.needs(x);
        self.push(Op::Scale(x, c), value, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.maximum(S::ZERO));
        let ng = self.needs(x);
        self.push(Op::Relu(x), value, ng)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu_val);
        let ng = self.needs(x);
        self.push(Op::Gelu(x), value, ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid_val);
        let ng = self.needs(x);
        self.push(Op::Sigmoid(x), value, ng)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(Scalar::sqrt);
        let ng = self.needs(x);
        self.push(Op::Sqrt(x), value, ng)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus_val);
        let ng = self.needs(x);
        self.push(Op::Softplus(x), value, ng)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let vx = self.value(x);
        check_axis(vx.shape(), axis)?;
        let value = softmax_fwd(vx, axis);
        let ng = self.needs(x);
        Ok(self.push(Op::Softmax { x, axis }, value, ng))
    }

    /// Normalize to zero mean and unit variance along `axis`.
    pub fn layer_norm(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let vx = self.value(x);
        check_axis(vx.shape(), axis)?;
        let value = layer_norm_fwd(vx, axis);
        let ng = self.needs(x);
        Ok(self.push(Op::LayerNorm { x, axis }, value, ng))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = S::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let ng = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(acc), ng)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let mut acc = S::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let value = Tensor::scalar(acc * (S::ONE / S::from_f64(n as f64)));
        let ng = self.needs(x);
        self.push(Op::Mean(x), value, ng)
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let value = upsample_fwd(self.value(x), factor)?;
        let ng = self.needs(x);
        Ok(self.push(Op::UpsampleNearest { x, factor }, value, ng))
    }

    pub fn downsample_stride(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let value = downsample_fwd(self.value(x), factor)?;
        let ng = self.needs(x);
        Ok(self.push(Op::DownsampleStride { x, factor }, value, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Reshape(x), value, ng))
    }

    pub fn permute(&mut self, x: NodeId, axes: Vec<usize>) -> Result<NodeId> {
        let value = permute_fwd(self.value(x), &axes)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Permute { x, axes }, value, ng))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).ndim() != 2 {
            return Err(LorunError::Dimension(format!(
                "transpose expects a 2-D tensor, got {:?}",
                self.value(x).shape()
            )));
        }
        self.permute(x, vec![1, 0])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(LorunError::Dimension("concat of zero tensors".into()));
        }
        let values: Vec<&Tensor<S>> = xs.iter().map(|&id| &self.nodes[id.0].value).collect();
        let value = concat_fwd(&values, axis)?;
        let ng = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            value,
            ng,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let value = slice_fwd(self.value(x), axis, start, len)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Slice { x, axis, start }, value, ng))
    }

    /// Broadcast a 1-element tensor to `shape`.
    pub fn fill_like(&mut self, scalar: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(scalar).item()?;
        let value = Tensor::full(shape, v);
        let ng = self.needs(scalar);
        Ok(self.push(Op::FillLike(scalar), value, ng))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<S>>, xs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<S>> = xs.iter().map(|&id| &self.nodes[id.0].value).collect();
        let value = op.forward(&values)?;
        let ng = xs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Op::Custom {
                op,
                xs: xs.to_vec(),
            },
            value,
            ng,
        ))
    }

    /// Reverse sweep from a scalar output. Returns gradients for every
    /// trainable leaf reachable from `out`; frozen leaves are absent.
    pub fn backward(&self, out: NodeId) -> Result<HashMap<String, Tensor<S>>> {
        if !self.value(out).is_scalar() {
            return Err(LorunError::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![S::ONE]);

        for i in (0..=out.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            // Inputs always precede the node, so split the buffer there.
            let (before, at) = grads.split_at_mut(i);
            let g = at[0].as_ref().expect("checked above");
            self.propagate(i, g, before)?;
        }

        let mut out_map = HashMap::new();
        for (name, id) in &self.params {
            if !self.nodes[id.0].trainable_leaf {
                continue;
            }
            if let Some(g) = &grads[id.0] {
                out_map.insert(
                    name.clone(),
                    Tensor::from_vec(self.value(*id).shape().to_vec(), g.clone())?,
                );
            }
        }
        Ok(out_map)
    }

    /// Accumulate the VJP of node `i` into its inputs' buffers.
    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let gt = Tensor::from_vec(node.value.shape().to_vec(), g.to_vec())?;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.needs(*a) {
                    // gA = g · Bᵀ
                    let ga = matmul_nt(&gt, vb)?;
                    accumulate(grads, a.0, ga.data());
                }
                if self.needs(*b) {
                    // gB = Aᵀ · g
                    let gb = matmul_tn(va, &gt)?;
                    accumulate(grads, b.0, gb.data());
                }
            }
            Op::Conv2d { x, w, padding } => {
                if self.needs(*x) {
                    let gx = conv2d_vjp_x(&gt, self.value(*w), *padding, self.value(*x).shape())?;
                    accumulate(grads, x.0, gx.data());
                }
                if self.needs(*w) {
                    let gw =
                        conv2d_vjp_w(&gt, self.value(*x), self.value(*w).shape(), *padding)?;
                    accumulate(grads, w.0, gw.data());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, a.0, g);
                }
                if self.needs(*b) {
                    accumulate(grads, b.0, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, a.0, g);
                }
                if self.needs(*b) {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    accumulate(grads, b.0, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga: Vec<S> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    accumulate(grads, a.0, &ga);
                }
                if self.needs(*b) {
                    let gb: Vec<S> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    accumulate(grads, b.0, &gb);
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    let ga: Vec<S> = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&gi, &bi)| gi / bi)
                        .collect();
                    accumulate(grads, a.0, &ga);
                }
                if self.needs(*b) {
                    let gb: Vec<S> = g
                        .iter()
                        .zip(node.value.data().iter().zip(self.value(*b).data()))
                        .map(|(&gi, (&yi, &bi))| -gi * yi / bi)
                        .collect();
                    accumulate(grads, b.0, &gb);
                }
            }
            Op::BiasAdd { x, b, axis } => {
                if self.needs(*x) {
                    accumulate(grads, x.0, g);
                }
                if self.needs(*b) {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let mut gb = vec![S::ZERO; len];
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            for i in 0..inner {
                                gb[j] += g[base + i];
                            }
                        }
                    }
                    accumulate(grads, b.0, &gb);
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let gx: Vec<S> = g.iter().map(|&v| v * *c).collect();
                    accumulate(grads, x.0, &gx);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let gx: Vec<S> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gi, &xi)| if xi > S::ZERO { gi } else { S::ZERO })
                        .collect();
                    accumulate(grads, x.0, &gx);
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let gx: Vec<S> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gi, &xi)| gi * gelu_grad(xi))
                        .collect();
                    accumulate(grads, x.0, &gx);
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let gx: Vec<S> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gi, &yi)| gi * yi * (S::ONE - yi))
                        .collect();
                    accumulate(grads, x.0, &gx);
                }
            }
            Op::Sqrt(x) => {
                if self.needs(*x) {
                    let half = S::from_f64(0.5);
                    let gx: Vec<S> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gi, &yi)| gi * half / yi)
                        .collect();
                    accumulate(grads, x.0, &gx);
                }
            }
            Op::Softplus(x) => {
                if self.needs(*x) {
                    let gx: Vec<S> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gi, &xi)| gi * sigmoid_val(xi))
                        .collect();
                    accumulate(grads, x.0, &gx);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let gx = softmax_vjp(&node.value, &gt, *axis);
                    accumulate(grads, x.0, gx.data());
                }
            }
            Op::LayerNorm { x, axis } => {
                if self.needs(*x) {
                    let gx = layer_norm_vjp(self.value(*x), &gt, *axis);
                    accumulate(grads, x.0, gx.data());
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let gx = vec![g[0]; self.value(*x).numel()];
                    accumulate(grads, x.0, &gx);
                }
            }
            Op::Mean(x) => {
                if self.needs(*x) {
                    let n = self.value(*x).numel();
                    let gv = g[0] * (S::ONE / S::from_f64(n as f64));
                    let gx = vec![gv; n];
                    accumulate(grads, x.0, &gx);
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if self.needs(*x) {
                    let gx = upsample_vjp(&gt, *factor, self.value(*x).shape());
                    accumulate(grads, x.0, gx.data());
                }
            }
            Op::DownsampleStride { x, factor } => {
                if self.needs(*x) {
                    let gx = downsample_vjp(&gt, *factor, self.value(*x).shape());
                    accumulate(grads, x.0, gx.data());
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    accumulate(grads, x.0, g);
                }
            }
            Op::Permute { x, axes } => {
                if self.needs(*x) {
                    let inverse = inverse_permutation(axes);
                    let gx = permute_fwd(&gt, &inverse)?;
                    accumulate(grads, x.0, gx.data());
                }
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for &xid in xs {
                    let part = self.value(xid).shape()[*axis];
                    if self.needs(xid) {
                        let gx = slice_fwd(&gt, *axis, start, part)?;
                        accumulate(grads, xid.0, gx.data());
                    }
                    start += part;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let gx = slice_vjp(&gt, *axis, *start, self.value(*x).shape());
                    accumulate(grads, x.0, gx.data());
                }
            }
            Op::FillLike(x) => {
                if self.needs(*x) {
                    let mut acc = S::ZERO;
                    for &v in g {
                        acc += v;
                    }
                    accumulate(grads, x.0, &[acc]);
                }
            }
            Op::Custom { op, xs } => {
                let values: Vec<&Tensor<S>> =
                    xs.iter().map(|&id| &self.nodes[id.0].value).collect();
                let needs: Vec<bool> = xs.iter().map(|&id| self.needs(id)).collect();
                let contribs = op.vjp(&values, &node.value, &gt, &needs)?;
                if contribs.len() != xs.len() {
                    return Err(LorunError::Contract(format!(
                        "custom op {} returned {} cotangents for {} inputs",
                        op.label(),
                        contribs.len(),
                        xs.len()
                    )));
                }
                for (xid, contrib) in xs.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        if self.needs(*xid) {
                            self.value(*xid).check_same_shape(&c)?;
                            accumulate(grads, xid.0, c.data());
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], id: usize, contribution: &[S]) {
    match &mut grads[id] {
        Some(buf) => {
            for (b, &c) in buf.iter_mut().zip(contribution) {
                *b += c;
            }
        }
        slot => *slot = Some(contribution.to_vec()),
    }
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(LorunError::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

/// Split a shape at `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---- scalar nonlinearities ----

fn sigmoid_val<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

fn softplus_val<S: Scalar>(x: S) -> S {
    // ln(1+e^x) = max(x,0) + ln1p(e^-|x|)
    x.maximum(S::ZERO) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * a * x * x)
}

// ---- op kernels (shared by forward and VJP paths) ----

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(LorunError::Dimension(format!(
            "matmul shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// a · bᵀ without materializing the transpose.
fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(LorunError::Dimension(format!(
            "matmul_nt shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![S::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = S::ZERO;
            let arow = &ad[i * k..(i + 1) * k];
            let brow = &bd[j * k..(j + 1) * k];
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// aᵀ · b without materializing the transpose.
fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(LorunError::Dimension(format!(
            "matmul_tn shapes {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![S::ZERO; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = ad[p * m + i];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Same-size 2-D cross-correlation: x `[C_in,H,W]`, w `[C_out,C_in,k,k]`.
pub fn conv2d_fwd<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, padding: Padding) -> Result<Tensor<S>> {
    let (cin, h, wd) = conv_input_dims(x)?;
    let ws = w.shape();
    if w.ndim() != 4 || ws[1] != cin {
        return Err(LorunError::Dimension(format!(
            "conv2d weight {:?} does not match input {:?}",
            ws,
            x.shape()
        )));
    }
    if ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(LorunError::Dimension(format!(
            "conv2d kernel must be square and odd, got {}x{}",
            ws[2], ws[3]
        )));
    }
    let (cout, k) = (ws[0], ws[2]);
    let c = (k / 2) as isize;
    let xd = x.data();
    let wv = w.data();
    let mut out = vec![S::ZERO; cout * h * wd];
    for co in 0..cout {
        for ci in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let weight = wv[((co * cin + ci) * k + dy) * k + dx];
                    let oy = dy as isize - c;
                    let ox = dx as isize - c;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        let sy = match padding {
                            Padding::Zero => {
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                sy as usize
                            }
                            Padding::Circular => wrap(sy, h),
                        };
                        let orow = &mut out[(co * h + y) * wd..(co * h + y + 1) * wd];
                        let xrow = &xd[(ci * h + sy) * wd..(ci * h + sy + 1) * wd];
                        match padding {
                            Padding::Zero => {
                                let lo = (-ox).max(0) as usize;
                                let hi = (wd as isize).min(wd as isize - ox).max(0) as usize;
                                for xo in lo..hi {
                                    orow[xo] += weight * xrow[(xo as isize + ox) as usize];
                                }
                            }
                            Padding::Circular => {
                                for (xo, o) in orow.iter_mut().enumerate() {
                                    *o += weight * xrow[wrap(xo as isize + ox, wd)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![cout, h, wd], out)
}

fn conv_input_dims<S: Scalar>(x: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if x.ndim() != 3 {
        return Err(LorunError::Dimension(format!(
            "conv2d input must be [C,H,W], got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

fn conv2d_vjp_x<S: Scalar>(
    g: &Tensor<S>,
    w: &Tensor<S>,
    padding: Padding,
    x_shape: &[usize],
) -> Result<Tensor<S>> {
    let ws = w.shape();
    let (cout, cin, k) = (ws[0], ws[1], ws[2]);
    let (h, wd) = (x_shape[1], x_shape[2]);
    let c = (k / 2) as isize;
    let gd = g.data();
    let wv = w.data();
    let mut gx = vec![S::ZERO; cin * h * wd];
    // x[ci, s] collects w[co,ci,q] * g[co, s - q + c].
    for ci in 0..cin {
        for co in 0..cout {
            for dy in 0..k {
                for dx in 0..k {
                    let weight = wv[((co * cin + ci) * k + dy) * k + dx];
                    let oy = c - dy as isize;
                    let ox = c - dx as isize;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        let sy = match padding {
                            Padding::Zero => {
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                sy as usize
                            }
                            Padding::Circular => wrap(sy, h),
                        };
                        let orow = &mut gx[(ci * h + y) * wd..(ci * h + y + 1) * wd];
                        let grow = &gd[(co * h + sy) * wd..(co * h + sy + 1) * wd];
                        match padding {
                            Padding::Zero => {
                                let lo = (-ox).max(0) as usize;
                                let hi = (wd as isize).min(wd as isize - ox).max(0) as usize;
                                for xo in lo..hi {
                                    orow[xo] += weight * grow[(xo as isize + ox) as usize];
                                }
                            }
                            Padding::Circular => {
                                for (xo, o) in orow.iter_mut().enumerate() {
                                    *o += weight * grow[wrap(xo as isize + ox, wd)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_shape.to_vec(), gx)
}

fn conv2d_vjp_w<S: Scalar>(
    g: &Tensor<S>,
    x: &Tensor<S>,
    w_shape: &[usize],
    padding: Padding,
) -> Result<Tensor<S>> {
    let (cout, cin, k) = (w_shape[0], w_shape[1], w_shape[2]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let c = (k / 2) as isize;
    let gd = g.data();
    let xd = x.data();
    let mut gw = vec![S::ZERO; cout * cin * k * k];
    for co in 0..cout {
        for ci in 0..cin {
            for dy in 0..k {
                for dx in 0..k {
                    let oy = dy as isize - c;
                    let ox = dx as isize - c;
                    let mut acc = S::ZERO;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        let sy = match padding {
                            Padding::Zero => {
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                sy as usize
                            }
                            Padding::Circular => wrap(sy, h),
                        };
                        let grow = &gd[(co * h + y) * wd..(co * h + y + 1) * wd];
                        let xrow = &xd[(ci * h + sy) * wd..(ci * h + sy + 1) * wd];
                        match padding {
                            Padding::Zero => {
                                let lo = (-ox).max(0) as usize;
                                let hi = (wd as isize).min(wd as isize - ox).max(0) as usize;
                                for xo in lo..hi {
                                    acc += grow[xo] * xrow[(xo as isize + ox) as usize];
                                }
                            }
                            Padding::Circular => {
                                for (xo, &gv) in grow.iter().enumerate() {
                                    acc += gv * xrow[wrap(xo as isize + ox, wd)];
                                }
                            }
                        }
                    }
                    gw[((co * cin + ci) * k + dy) * k + dx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(w_shape.to_vec(), gw)
}

fn softmax_fwd<S: Scalar>(x: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![S::ZERO; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut mx = xd[idx(0)];
            for j in 1..len {
                mx = mx.maximum(xd[idx(j)]);
            }
            let mut denom = S::ZERO;
            for j in 0..len {
                let e = (xd[idx(j)] - mx).exp();
                out[idx(j)] = e;
                denom += e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / denom;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("same shape")
}

fn softmax_vjp<S: Scalar>(y: &Tensor<S>, g: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let yd = y.data();
    let gd = g.data();
    let mut gx = vec![S::ZERO; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut dot = S::ZERO;
            for j in 0..len {
                dot += gd[idx(j)] * yd[idx(j)];
            }
            for j in 0..len {
                gx[idx(j)] = yd[idx(j)] * (gd[idx(j)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), gx).expect("same shape")
}

fn layer_norm_fwd<S: Scalar>(x: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let n = S::from_f64(len as f64);
    let mut out = vec![S::ZERO; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut mean = S::ZERO;
            for j in 0..len {
                mean += xd[idx(j)];
            }
            mean = mean / n;
            let mut var = S::ZERO;
            for j in 0..len {
                let d = xd[idx(j)] - mean;
                var += d * d;
            }
            var = var / n;
            let inv_sigma = S::ONE / (var + S::NORM_EPS).sqrt();
            for j in 0..len {
                out[idx(j)] = (xd[idx(j)] - mean) * inv_sigma;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out).expect("same shape")
}

fn layer_norm_vjp<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let gd = g.data();
    let n = S::from_f64(len as f64);
    let mut gx = vec![S::ZERO; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut mean = S::ZERO;
            for j in 0..len {
                mean += xd[idx(j)];
            }
            mean = mean / n;
            let mut var = S::ZERO;
            for j in 0..len {
                let d = xd[idx(j)] - mean;
                var += d * d;
            }
            var = var / n;
            let inv_sigma = S::ONE / (var + S::NORM_EPS).sqrt();
            let mut g_mean = S::ZERO;
            let mut gxhat_mean = S::ZERO;
            for j in 0..len {
                let xhat = (xd[idx(j)] - mean) * inv_sigma;
                g_mean += gd[idx(j)];
                gxhat_mean += gd[idx(j)] * xhat;
            }
            g_mean = g_mean / n;
            gxhat_mean = gxhat_mean / n;
            for j in 0..len {
                let xhat = (xd[idx(j)] - mean) * inv_sigma;
                gx[idx(j)] = inv_sigma * (gd[idx(j)] - g_mean - xhat * gxhat_mean);
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), gx).expect("same shape")
}

fn upsample_fwd<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (c, h, w) = conv_input_dims(x)?;
    if factor == 0 {
        return Err(LorunError::Dimension("upsample factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![S::ZERO; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                out[(ci * oh + y) * ow + xo] = xd[(ci * h + y / factor) * w + xo / factor];
            }
        }
    }
    Tensor::from_vec(vec![c, oh, ow], out)
}

fn upsample_vjp<S: Scalar>(g: &Tensor<S>, factor: usize, x_shape: &[usize]) -> Tensor<S> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let gd = g.data();
    let mut gx = vec![S::ZERO; c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                gx[(ci * h + y / factor) * w + xo / factor] += gd[(ci * oh + y) * ow + xo];
            }
        }
    }
    Tensor::from_vec(x_shape.to_vec(), gx).expect("same shape")
}

fn downsample_fwd<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    let (c, h, w) = conv_input_dims(x)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(LorunError::Dimension(format!(
            "downsample factor {factor} does not divide spatial dims {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let xd = x.data();
    let mut out = vec![S::ZERO; c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                out[(ci * oh + y) * ow + xo] = xd[(ci * h + y * factor) * w + xo * factor];
            }
        }
    }
    Tensor::from_vec(vec![c, oh, ow], out)
}

fn downsample_vjp<S: Scalar>(g: &Tensor<S>, factor: usize, x_shape: &[usize]) -> Tensor<S> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (h / factor, w / factor);
    let gd = g.data();
    let mut gx = vec![S::ZERO; c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                gx[(ci * h + y * factor) * w + xo * factor] = gd[(ci * oh + y) * ow + xo];
            }
        }
    }
    Tensor::from_vec(x_shape.to_vec(), gx).expect("same shape")
}

pub fn permute_fwd<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(LorunError::Dimension(format!(
            "invalid permutation {axes:?} for shape {:?}",
            x.shape()
        )));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let xd = x.data();
    let mut out = vec![S::ZERO; xd.len()];
    let mut index = vec![0usize; nd];
    for &v in xd {
        let mut off = 0;
        for (d, &a) in axes.iter().enumerate() {
            off += index[a] * out_strides[d];
        }
        out[off] = v;
        // advance the row-major multi-index
        for d in (0..nd).rev() {
            index[d] += 1;
            if index[d] < in_shape[d] {
                break;
            }
            index[d] = 0;
        }
    }
    let _ = in_strides;
    Tensor::from_vec(out_shape, out)
}

fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn concat_fwd<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    check_axis(parts[0].shape(), axis)?;
    let base = parts[0].shape();
    let mut total = 0;
    for p in parts {
        if p.ndim() != base.len() {
            return Err(LorunError::Dimension("concat rank mismatch".into()));
        }
        for (d, (&a, &b)) in base.iter().zip(p.shape()).enumerate() {
            if d != axis && a != b {
                return Err(LorunError::Dimension(format!(
                    "concat shape mismatch on axis {d}: {:?} vs {:?}",
                    base,
                    p.shape()
                )));
            }
        }
        total += p.shape()[axis];
    }
    let mut out_shape = base.to_vec();
    out_shape[axis] = total;
    let (outer, _, inner) = axis_split(&out_shape, axis);
    let mut out = vec![S::ZERO; out_shape.iter().product()];
    let mut offset = 0;
    for p in parts {
        let plen = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let src = &pd[o * plen * inner..(o + 1) * plen * inner];
            let dst_base = (o * total + offset) * inner;
            out[dst_base..dst_base + plen * inner].copy_from_slice(src);
        }
        offset += plen;
    }
    Tensor::from_vec(out_shape, out)
}

fn slice_fwd<S: Scalar>(x: &Tensor<S>, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
    check_axis(x.shape(), axis)?;
    let (outer, full, inner) = axis_split(x.shape(), axis);
    if len == 0 || start + len > full {
        return Err(LorunError::Dimension(format!(
            "slice [{start}, {}) out of range for axis {axis} of {:?}",
            start + len,
            x.shape()
        )));
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let xd = x.data();
    let mut out = vec![S::ZERO; outer * len * inner];
    for o in 0..outer {
        let src_base = (o * full + start) * inner;
        let dst_base = o * len * inner;
        out[dst_base..dst_base + len * inner]
            .copy_from_slice(&xd[src_base..src_base + len * inner]);
    }
    Tensor::from_vec(out_shape, out)
}

fn slice_vjp<S: Scalar>(g: &Tensor<S>, axis: usize, start: usize, x_shape: &[usize]) -> Tensor<S> {
    let (outer, full, inner) = axis_split(x_shape, axis);
    let len = g.shape()[axis];
    let gd = g.data();
    let mut gx = vec![S::ZERO; x_shape.iter().product()];
    for o in 0..outer {
        let dst_base = (o * full + start) * inner;
        let src_base = o * len * inner;
        gx[dst_base..dst_base + len * inner]
            .copy_from_slice(&gd[src_base..src_base + len * inner]);
    }
    Tensor::from_vec(x_shape.to_vec(), gx).expect("same numel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{check_grad_sampled, rel_err};
    use crate::rng::Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = ComputeGraph::new();
        let i2 = g.constant(t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut g = ComputeGraph::new();
        let a = g.constant(t(&[1, 2], vec![1.0, 1.0]));
        let b = g.constant(t(&[2, 1], vec![2.0, 3.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[5.0]);
    }

    #[test]
    fn matmul_inner_mismatch_rejected() {
        let mut g = ComputeGraph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[4, 2]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = Rng::new(42);
        let a0 = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let b0 = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);

        let mut g = ComputeGraph::new();
        let a = g.leaf("a", a0.clone(), true).unwrap();
        let b = g.leaf("b", b0.clone(), true).unwrap();
        let mm = g.matmul(a, b).unwrap();
        let out = g.sum(mm);
        let grads = g.backward(out).unwrap();

        let fa = |at: &Tensor<f64>| {
            let mut gg = ComputeGraph::new();
            let a = gg.constant(at.clone());
            let b = gg.constant(b0.clone());
            let mm = gg.matmul(a, b).unwrap();
            let s = gg.sum(mm);
            gg.value(s).item().unwrap()
        };
        let err = check_grad_sampled(&fa, &a0, &grads["a"], 1e-6, 64, 1);
        assert!(err < 1e-6, "matmul grad a rel err {err}");

        let fb = |bt: &Tensor<f64>| {
            let mut gg = ComputeGraph::new();
            let a = gg.constant(a0.clone());
            let b = gg.constant(bt.clone());
            let mm = gg.matmul(a, b).unwrap();
            let s = gg.sum(mm);
            gg.value(s).item().unwrap()
        };
        let err = check_grad_sampled(&fb, &b0, &grads["b"], 1e-6, 64, 2);
        assert!(err < 1e-6, "matmul grad b rel err {err}");
    }

    #[test]
    fn conv2d_dirac_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::randn(&[1, 5, 5], 1.0, &mut rng);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let w = t(&[1, 1, 3, 3], w);
        for padding in [Padding::Zero, Padding::Circular] {
            let out = conv2d_fwd(&x, &w, padding).unwrap();
            assert!(out.max_abs_diff(&x).unwrap() < 1e-15);
        }
    }

    #[test]
    fn conv2d_ones_kernel_center_sum() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d_fwd(&x, &w, Padding::Zero).unwrap();
        assert_eq!(out.data()[4], 9.0);
        // corner sees only a 2x2 neighborhood under zero padding
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn conv2d_even_kernel_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d_fwd(&x, &w, Padding::Zero).is_err());
    }

    #[test]
    fn conv2d_weight_gradient_matches_finite_differences() {
        for padding in [Padding::Zero, Padding::Circular] {
            let mut rng = Rng::new(9);
            let x0 = Tensor::<f64>::randn(&[2, 6, 6], 1.0, &mut rng);
            let w0 = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, &mut rng);

            let mut g = ComputeGraph::new();
            let x = g.leaf("x", x0.clone(), true).unwrap();
            let w = g.leaf("w", w0.clone(), true).unwrap();
            let y = g.conv2d(x, w, padding).unwrap();
            let out = g.sum(y);
            let grads = g.backward(out).unwrap();

            let fw = |wt: &Tensor<f64>| {
                let out = conv2d_fwd(&x0, wt, padding).unwrap();
                out.data().iter().sum::<f64>()
            };
            let err = check_grad_sampled(&fw, &w0, &grads["w"], 1e-6, 40, 3);
            assert!(err < 1e-6, "conv2d grad w rel err {err} ({padding:?})");

            let fx = |xt: &Tensor<f64>| {
                let out = conv2d_fwd(xt, &w0, padding).unwrap();
                out.data().iter().sum::<f64>()
            };
            let err = check_grad_sampled(&fx, &x0, &grads["x"], 1e-6, 40, 4);
            assert!(err < 1e-6, "conv2d grad x rel err {err} ({padding:?})");
        }
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut g = ComputeGraph::new();
        let x = g.constant(t(&[3], vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = ComputeGraph::new();
        let x = g.constant(t(&[2], vec![-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let mut rng = Rng::new(5);
        let x0 = Tensor::<f64>::randn(&[4, 16], 2.0, &mut rng);
        let mut g = ComputeGraph::new();
        let x = g.constant(x0);
        let y = g.layer_norm(x, 1).unwrap();
        let yd = g.value(y).data();
        for row in 0..4 {
            let vals = &yd[row * 16..(row + 1) * 16];
            let mean: f64 = vals.iter().sum::<f64>() / 16.0;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn axis_out_of_range_rejected() {
        let mut g = ComputeGraph::new();
        let x = g.constant(Tensor::<f64>::zeros(&[2, 2]));
        assert!(g.softmax(x, 2).is_err());
        assert!(g.layer_norm(x, 5).is_err());
        assert!(g.concat(&[x, x], 3).is_err());
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut rng = Rng::new(2);
        let x0 = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let mut g = ComputeGraph::new();
        let x = g.leaf("x", x0, true).unwrap();
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads["x"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frozen_leaves_absent_from_gradient_map() {
        // f = sum((W0 + A·B) x) with A frozen: map holds B (and x path), not A
        let mut rng = Rng::new(3);
        let w0 = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let a0 = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng);
        let b0 = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let x0 = Tensor::<f64>::randn(&[4, 1], 1.0, &mut rng);

        let mut g = ComputeGraph::new();
        let w = g.leaf("w0", w0, false).unwrap();
        let a = g.leaf("a", a0, false).unwrap();
        let b = g.leaf("b", b0, true).unwrap();
        let x = g.constant(x0);
        let ab = g.matmul(a, b).unwrap();
        let eff = g.add(w, ab).unwrap();
        let y = g.matmul(eff, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.contains_key("b"));
        assert!(!grads.contains_key("a"));
        assert!(!grads.contains_key("w0"));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = ComputeGraph::new();
        let x = g.leaf("x", Tensor::<f64>::zeros(&[2, 2]), true).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn gradient_of_sum_is_linear_in_terms() {
        // backward of a+b propagates identity into both terms
        let mut rng = Rng::new(8);
        let a0 = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let b0 = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let mut g = ComputeGraph::new();
        let a = g.leaf("a", a0, true).unwrap();
        let b = g.leaf("b", b0, true).unwrap();
        let s = g.add(a, b).unwrap();
        let total = g.sum(s);
        let grads = g.backward(total).unwrap();
        assert!(grads["a"].data().iter().all(|&v| v == 1.0));
        assert!(grads["b"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn composite_elementwise_gradients_match_finite_differences() {
        // one composite touching gelu, sigmoid, softplus, softmax, layer_norm,
        // mul, bias_add, slice, concat, permute, mean
        let mut rng = Rng::new(77);
        let x0 = Tensor::<f64>::randn(&[4, 6], 0.8, &mut rng);
        let b0 = Tensor::<f64>::randn(&[6], 0.5, &mut rng);

        let run = |xt: &Tensor<f64>, bt: &Tensor<f64>, g: &mut ComputeGraph<f64>, train: bool| {
            let x = if train {
                g.leaf("x", xt.clone(), true).unwrap()
            } else {
                g.constant(xt.clone())
            };
            let b = if train {
                g.leaf("b", bt.clone(), true).unwrap()
            } else {
                g.constant(bt.clone())
            };
            let h = g.bias_add(x, b, 1).unwrap();
            let h = g.gelu(h);
            let hn = g.layer_norm(h, 1).unwrap();
            let sm = g.softmax(hn, 1).unwrap();
            let sp = g.softplus(h);
            let prod = g.mul(sm, sp).unwrap();
            let left = g.slice(prod, 1, 0, 3).unwrap();
            let right = g.slice(prod, 1, 3, 3).unwrap();
            let sig = g.sigmoid(right);
            let cat = g.concat(&[left, sig], 1).unwrap();
            let pt = g.permute(cat, vec![1, 0]).unwrap();
            g.mean(pt)
        };

        let mut g = ComputeGraph::new();
        let out = run(&x0, &b0, &mut g, true);
        let grads = g.backward(out).unwrap();

        let fx = |xt: &Tensor<f64>| {
            let mut g = ComputeGraph::new();
            let out = run(xt, &b0, &mut g, false);
            g.value(out).item().unwrap()
        };
        let err = check_grad_sampled(&fx, &x0, &grads["x"], 1e-6, 24, 10);
        assert!(err < 1e-4, "composite grad x rel err {err}");

        let fb = |bt: &Tensor<f64>| {
            let mut g = ComputeGraph::new();
            let out = run(&x0, bt, &mut g, false);
            g.value(out).item().unwrap()
        };
        let err = check_grad_sampled(&fb, &b0, &grads["b"], 1e-6, 6, 11);
        assert!(err < 1e-4, "composite grad b rel err {err}");
    }

    #[test]
    fn up_down_sampling_shapes_and_grads() {
        let mut rng = Rng::new(6);
        let x0 = Tensor::<f64>::randn(&[2, 4, 4], 1.0, &mut rng);

        let mut g = ComputeGraph::new();
        let x = g.leaf("x", x0.clone(), true).unwrap();
        let up = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(up).shape(), &[2, 8, 8]);
        let down = g.downsample_stride(up, 4).unwrap();
        assert_eq!(g.value(down).shape(), &[2, 2, 2]);
        let s = g.sum(down);
        let grads = g.backward(s).unwrap();

        let f = |xt: &Tensor<f64>| {
            let mut g = ComputeGraph::new();
            let x = g.constant(xt.clone());
            let up = g.upsample_nearest(x, 2).unwrap();
            let down = g.downsample_stride(up, 4).unwrap();
            let s = g.sum(down);
            g.value(s).item().unwrap()
        };
        let err = check_grad_sampled(&f, &x0, &grads["x"], 1e-6, 32, 12);
        assert!(err < 1e-8, "sampling grad rel err {err}");
    }

    #[test]
    fn fill_like_broadcasts_scalar_and_sums_gradient() {
        let mut g = ComputeGraph::new();
        let s = g.leaf("s", Tensor::scalar(1.5f64), true).unwrap();
        let filled = g.fill_like(s, &[2, 3]).unwrap();
        assert!(g.value(filled).data().iter().all(|&v| v == 1.5));
        let total = g.sum(filled);
        let grads = g.backward(total).unwrap();
        assert_eq!(grads["s"].data(), &[6.0]);
    }

    #[test]
    fn softplus_hits_half_at_documented_raw_value() {
        let raw = (0.5f64.exp() - 1.0).ln();
        let mut g = ComputeGraph::new();
        let x = g.constant(Tensor::scalar(raw));
        let y = g.softplus(x);
        assert!(rel_err(g.value(y).item().unwrap(), 0.5) < 1e-12);
    }

    #[test]
    fn duplicate_leaf_name_rejected() {
        let mut g = ComputeGraph::new();
        g.leaf("w", Tensor::<f64>::zeros(&[1]), true).unwrap();
        assert!(g.leaf("w", Tensor::<f64>::zeros(&[1]), true).is_err());
    }
}
