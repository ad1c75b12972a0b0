//! Reverse-mode differentiation tape over the handful of operations the
//! fusion network is built from.
//!
//! A [`Graph`] borrows a [`ParamSet`] read-only, records every forward value,
//! and [`Graph::backward`] returns gradients for all parameters. One graph
//! processes one sample; batching happens by summing [`Gradients`].

use crate::conv::{conv2d_backward_with, conv2d_forward_with, Precision};
use crate::error::{FusionError, Result};
use crate::params::{Conv2d, LayerNorm, ParamSet};
use crate::tensor::Tensor;

pub type NodeId = usize;

pub const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Input,
    Conv { input: NodeId, layer: Conv2d },
    Relu(NodeId),
    Sigmoid(NodeId),
    Concat(Vec<NodeId>),
    /// Single-channel map broadcast-multiplied over every feature channel.
    Gate { map: NodeId, features: NodeId },
    Add(NodeId, NodeId),
    LayerNorm {
        input: NodeId,
        layer: LayerNorm,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    precision: Precision,
}

/// Parameter gradients, one buffer per tensor of the owning [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(params: &ParamSet) -> Self {
        Gradients {
            grads: params.zeros_like(),
        }
    }

    pub fn from_vecs(grads: Vec<Vec<f64>>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, id: usize) -> &[f64] {
        &self.grads[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.grads.iter()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self::with_precision(params, Precision::F64)
    }

    pub fn with_precision(params: &'p ParamSet, precision: Precision) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn conv(&mut self, input: NodeId, layer: &Conv2d) -> Result<NodeId> {
        let x = &self.nodes[input].value;
        if x.channels() != layer.in_channels() {
            return Err(FusionError::ChannelMismatch {
                expected: layer.in_channels(),
                found: x.channels(),
            });
        }
        let y = conv2d_forward_with(
            x,
            self.params.values(layer.weight),
            self.params.values(layer.bias),
            &layer.shape,
            self.precision,
        );
        Ok(self.push(
            y,
            Op::Conv {
                input,
                layer: *layer,
            },
            true,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let y = self.nodes[input].value.map(|v| v.max(0.0));
        let rg = self.nodes[input].requires_grad;
        self.push(y, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let y = self.nodes[input].value.map(sigmoid);
        let rg = self.nodes[input].requires_grad;
        self.push(y, Op::Sigmoid(input), rg)
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let parts: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let y = Tensor::concat(&parts)?;
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(y, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn gate(&mut self, map: NodeId, features: NodeId) -> Result<NodeId> {
        let m = &self.nodes[map].value;
        let f = &self.nodes[features].value;
        if m.channels() != 1 {
            return Err(FusionError::ChannelMismatch {
                expected: 1,
                found: m.channels(),
            });
        }
        if m.spatial() != f.spatial() {
            return Err(FusionError::DimensionMismatch {
                left: m.spatial(),
                right: f.spatial(),
            });
        }
        let mut y = f.clone();
        let mp = m.channel(0);
        for c in 0..y.channels() {
            for (v, a) in y.channel_mut(c).iter_mut().zip(mp) {
                *v *= a;
            }
        }
        let rg = self.nodes[map].requires_grad || self.nodes[features].requires_grad;
        Ok(self.push(y, Op::Gate { map, features }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (&self.nodes[a].value, &self.nodes[b].value);
        if x.channels() != y.channels() || x.spatial() != y.spatial() {
            return Err(FusionError::shape(format!(
                "cannot add {}x{:?} and {}x{:?}",
                x.channels(),
                x.spatial(),
                y.channels(),
                y.spatial()
            )));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Normalizes over channels at every spatial location, then applies the
    /// per-channel scale and shift.
    pub fn layer_norm(&mut self, input: NodeId, layer: &LayerNorm) -> Result<NodeId> {
        let x = &self.nodes[input].value;
        if x.channels() != layer.channels {
            return Err(FusionError::ChannelMismatch {
                expected: layer.channels,
                found: x.channels(),
            });
        }
        let (normalized, inv_std) = normalize_channels(x);
        let scale = self.params.values(layer.scale);
        let shift = self.params.values(layer.shift);
        let mut y = normalized.clone();
        for c in 0..y.channels() {
            let (s, b) = (scale[c], shift[c]);
            y.channel_mut(c).iter_mut().for_each(|v| *v = s * *v + b);
        }
        Ok(self.push(
            y,
            Op::LayerNorm {
                input,
                layer: *layer,
                normalized,
                inv_std,
            },
            true,
        ))
    }

    /// Backpropagates `seed` (dL/d output) and returns dL/d parameters.
    pub fn backward(&self, output: NodeId, seed: Tensor) -> Gradients {
        let mut grads = Gradients::zeros(self.params);
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[output] = Some(seed);

        for id in (0..=output).rev() {
            let Some(g) = node_grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Conv { input, layer } => {
                    let want = self.nodes[*input].requires_grad;
                    let (gw, gb) = two_mut(&mut grads.grads, layer.weight, layer.bias);
                    let gx = conv2d_backward_with(
                        &self.nodes[*input].value,
                        self.params.values(layer.weight),
                        &g,
                        &layer.shape,
                        gw,
                        gb,
                        want,
                        self.precision,
                    );
                    if let Some(gx) = gx {
                        accumulate(&mut node_grads, *input, gx);
                    }
                }
                Op::Relu(input) => {
                    let mut gx = g;
                    for (d, y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut node_grads, *input, gx);
                }
                Op::Sigmoid(input) => {
                    let mut gx = g;
                    for (d, s) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= s * (1.0 - s);
                    }
                    accumulate(&mut node_grads, *input, gx);
                }
                Op::Concat(inputs) => {
                    let mut start = 0;
                    for &i in inputs {
                        let c = self.nodes[i].value.channels();
                        if self.nodes[i].requires_grad {
                            accumulate(&mut node_grads, i, g.slice_channels(start, c));
                        }
                        start += c;
                    }
                }
                Op::Gate { map, features } => {
                    let m = &self.nodes[*map].value;
                    let f = &self.nodes[*features].value;
                    if self.nodes[*map].requires_grad {
                        let mut gm = Tensor::zeros(1, m.height(), m.width());
                        for c in 0..f.channels() {
                            for ((acc, d), v) in gm.channel_mut(0).iter_mut().zip(g.channel(c)).zip(f.channel(c)) {
                                *acc += d * v;
                            }
                        }
                        accumulate(&mut node_grads, *map, gm);
                    }
                    if self.nodes[*features].requires_grad {
                        let mut gf = g;
                        let mp = m.channel(0);
                        for c in 0..gf.channels() {
                            for (d, a) in gf.channel_mut(c).iter_mut().zip(mp) {
                                *d *= a;
                            }
                        }
                        accumulate(&mut node_grads, *features, gf);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*b].requires_grad {
                        accumulate(&mut node_grads, *b, g.clone());
                    }
                    if self.nodes[*a].requires_grad {
                        accumulate(&mut node_grads, *a, g);
                    }
                }
                Op::LayerNorm {
                    input,
                    layer,
                    normalized,
                    inv_std,
                } => {
                    let scale = self.params.values(layer.scale);
                    {
                        let (gs, gb) = two_mut(&mut grads.grads, layer.scale, layer.shift);
                        for c in 0..g.channels() {
                            let gc = g.channel(c);
                            gb[c] += gc.iter().sum::<f64>();
                            gs[c] += gc.iter().zip(normalized.channel(c)).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    if self.nodes[*input].requires_grad {
                        let gx = layer_norm_input_grad(&g, normalized, inv_std, scale);
                        accumulate(&mut node_grads, *input, gx);
                    }
                }
            }
        }
        grads
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Channel-wise standardization per location: returns (x_hat, 1/std).
pub fn normalize_channels(x: &Tensor) -> (Tensor, Vec<f64>) {
    let n = x.plane_len();
    let c = x.channels() as f64;
    let mut mean = vec![0.0; n];
    for ch in 0..x.channels() {
        for (m, v) in mean.iter_mut().zip(x.channel(ch)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c);
    let mut var = vec![0.0; n];
    for ch in 0..x.channels() {
        for ((s, v), m) in var.iter_mut().zip(x.channel(ch)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / c + LAYER_NORM_EPS).sqrt()).collect();
    let mut out = x.clone();
    for ch in 0..x.channels() {
        for (k, v) in out.channel_mut(ch).iter_mut().enumerate() {
            *v = (*v - mean[k]) * inv_std[k];
        }
    }
    (out, inv_std)
}

fn layer_norm_input_grad(g: &Tensor, normalized: &Tensor, inv_std: &[f64], scale: &[f64]) -> Tensor {
    let n = g.plane_len();
    let c = g.channels();
    let mut mean_d = vec![0.0; n];
    let mut mean_dx = vec![0.0; n];
    for ch in 0..c {
        for k in 0..n {
            let d = g.channel(ch)[k] * scale[ch];
            mean_d[k] += d;
            mean_dx[k] += d * normalized.channel(ch)[k];
        }
    }
    let inv_c = 1.0 / c as f64;
    let mut out = Tensor::zeros(c, g.height(), g.width());
    for ch in 0..c {
        let (gc, xc) = (g.channel(ch), normalized.channel(ch));
        for (k, o) in out.channel_mut(ch).iter_mut().enumerate() {
            let d = gc[k] * scale[ch];
            *o = inv_std[k] * (d - mean_d[k] * inv_c - xc[k] * mean_dx[k] * inv_c);
        }
    }
    out
}

fn accumulate(node_grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut node_grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
