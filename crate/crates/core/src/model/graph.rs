//! A small static computation graph for convolutional backbones.
//!
//! Nodes are stored in topological order. Parameterised layers (convolution,
//! depthwise/separable convolution, batch normalisation) own their tensors
//! and carry the trainable flag used by the freeze policy. Batch
//! normalisation always runs in inference mode: moving statistics are fixed
//! and only the affine scale/offset can train.

use serde::{Deserialize, Serialize};

use super::ops::{col2im, gemm, im2col, Padding, Shape, Window};

pub type NodeId = usize;
pub type ParamId = usize;
pub type LayerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    /// Moving statistics; never updated by the optimiser.
    Statistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub role: ParamRole,
    pub layer: LayerId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    SeparableConv,
    BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub params: Vec<ParamId>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Conv {
        layer: LayerId,
        kernel: usize,
        stride: usize,
        padding: Padding,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Depthwise {
        layer: LayerId,
        kernel: usize,
        stride: usize,
        padding: Padding,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        layer: LayerId,
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
        eps: f32,
    },
    Relu,
    Relu6,
    Add,
    ZeroPad {
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
        padding: Padding,
    },
}

impl Op {
    pub fn layer(&self) -> Option<LayerId> {
        match *self {
            Op::Conv { layer, .. } | Op::Depthwise { layer, .. } | Op::BatchNorm { layer, .. } => Some(layer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub layers: Vec<Layer>,
    pub params: Vec<Param>,
}

/// Which nodes need gradients and which activations must survive the
/// forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Plan {
    pub requires_grad: Vec<bool>,
    keep: Vec<bool>,
    last_use: Vec<usize>,
}

impl Plan {
    pub fn any_grad(&self) -> bool {
        self.requires_grad.iter().any(|&r| r)
    }
}

/// Per-parameter gradient buffers; empty for parameters that do not train.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros(graph: &Graph) -> Self {
        Grads {
            data: graph
                .params
                .iter()
                .map(|p| {
                    if graph.param_trains(p) {
                        vec![0.0; p.data.len()]
                    } else {
                        Vec::new()
                    }
                })
                .collect(),
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

impl Graph {
    pub fn input_shape(&self) -> Shape {
        self.nodes[0].shape
    }

    pub fn output_shape(&self) -> Shape {
        self.nodes.last().expect("non-empty graph").shape
    }

    pub fn param_trains(&self, p: &Param) -> bool {
        p.role == ParamRole::Weight && self.layers[p.layer].trainable
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.iter().filter(|p| self.param_trains(p)).map(|p| p.data.len()).sum()
    }

    /// Plan for a forward pass only: every intermediate is freed early.
    pub fn inference_plan(&self) -> Plan {
        let mut plan = self.plan();
        plan.requires_grad.iter_mut().for_each(|r| *r = false);
        plan.keep.iter_mut().for_each(|k| *k = false);
        *plan.keep.last_mut().expect("non-empty graph") = true;
        plan
    }

    pub fn plan(&self) -> Plan {
        let n = self.nodes.len();
        let mut requires_grad = vec![false; n];
        let mut last_use = vec![0usize; n];
        for (i, node) in self.nodes.iter().enumerate() {
            let own = node.op.layer().is_some_and(|l| self.layers[l].trainable);
            requires_grad[i] = own || node.inputs.iter().any(|&j| requires_grad[j]);
            for &j in &node.inputs {
                last_use[j] = i;
            }
        }
        let mut keep = vec![false; n];
        keep[n - 1] = true;
        for (i, node) in self.nodes.iter().enumerate() {
            if requires_grad[i] {
                for &j in &node.inputs {
                    keep[j] = true;
                }
                if matches!(node.op, Op::Relu | Op::Relu6) {
                    keep[i] = true;
                }
            }
        }
        Plan {
            requires_grad,
            keep,
            last_use,
        }
    }

    /// Runs the graph on one HWC sample. Activations not needed by `plan`
    /// are dropped as soon as their last consumer has run.
    pub fn forward(&self, x: &[f32], plan: &Plan) -> Vec<Option<Vec<f32>>> {
        assert_eq!(x.len(), self.input_shape().len(), "input size");
        let mut acts: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        let mut scratch = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let out = if i == 0 {
                x.to_vec()
            } else {
                let inputs: Vec<&[f32]> = node
                    .inputs
                    .iter()
                    .map(|&j| acts[j].as_deref().expect("activation freed too early"))
                    .collect();
                let in_shapes: Vec<Shape> = node.inputs.iter().map(|&j| self.nodes[j].shape).collect();
                self.forward_op(node, &inputs, &in_shapes, &mut scratch)
            };
            acts[i] = Some(out);
            for &j in &node.inputs {
                if plan.last_use[j] == i && !plan.keep[j] {
                    acts[j] = None;
                }
            }
        }
        acts
    }

    /// Convenience: forward with no gradient bookkeeping, returning the output.
    pub fn infer(&self, x: &[f32], plan: &Plan) -> Vec<f32> {
        let mut acts = self.forward(x, plan);
        acts.pop().flatten().expect("output activation")
    }

    fn forward_op(&self, node: &Node, inputs: &[&[f32]], in_shapes: &[Shape], scratch: &mut Vec<f32>) -> Vec<f32> {
        let out_shape = node.shape;
        match node.op {
            Op::Input => unreachable!(),
            Op::Conv {
                kernel,
                stride,
                padding,
                weight,
                bias,
                ..
            } => {
                let win = Window::new(in_shapes[0], kernel, stride, padding);
                let kk = kernel * kernel * in_shapes[0].c;
                let oc = out_shape.c;
                let mut out = vec![0.0; win.positions() * oc];
                let w = &self.params[weight].data;
                if win.is_pointwise() {
                    gemm(win.positions(), kk, oc, inputs[0], false, w, false, 0.0, &mut out);
                } else {
                    im2col(inputs[0], &win, scratch);
                    gemm(win.positions(), kk, oc, scratch, false, w, false, 0.0, &mut out);
                }
                if let Some(b) = bias {
                    let b = &self.params[b].data;
                    for row in out.chunks_exact_mut(oc) {
                        for (o, bb) in row.iter_mut().zip(b) {
                            *o += bb;
                        }
                    }
                }
                out
            }
            Op::Depthwise {
                kernel,
                stride,
                padding,
                weight,
                bias,
                ..
            } => {
                let win = Window::new(in_shapes[0], kernel, stride, padding);
                depthwise_forward(inputs[0], &win, &self.params[weight].data, bias.map(|b| &self.params[b].data[..]))
            }
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
                ..
            } => {
                let (scale, shift) = bn_affine(
                    &self.params[gamma].data,
                    &self.params[beta].data,
                    &self.params[mean].data,
                    &self.params[var].data,
                    eps,
                );
                let mut out = inputs[0].to_vec();
                for px in out.chunks_exact_mut(scale.len()) {
                    for ((v, a), b) in px.iter_mut().zip(&scale).zip(&shift) {
                        *v = *v * a + b;
                    }
                }
                out
            }
            Op::Relu => inputs[0].iter().map(|&v| v.max(0.0)).collect(),
            Op::Relu6 => inputs[0].iter().map(|&v| v.clamp(0.0, 6.0)).collect(),
            Op::Add => inputs[0].iter().zip(inputs[1]).map(|(a, b)| a + b).collect(),
            Op::ZeroPad { top, left, .. } => {
                let s = in_shapes[0];
                let mut out = vec![0.0; out_shape.len()];
                for y in 0..s.h {
                    let dst = ((y + top) * out_shape.w + left) * s.c;
                    out[dst..dst + s.w * s.c].copy_from_slice(&inputs[0][y * s.w * s.c..(y + 1) * s.w * s.c]);
                }
                out
            }
            Op::MaxPool { size, stride, padding } => {
                let win = Window::new(in_shapes[0], size, stride, padding);
                maxpool(inputs[0], &win).0
            }
        }
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the graph output) through
    /// the nodes that require gradients, accumulating into `grads`.
    pub fn backward(&self, acts: &[Option<Vec<f32>>], plan: &Plan, grad_out: Vec<f32>, grads: &mut Grads) {
        let n = self.nodes.len();
        let mut node_grads: Vec<Option<Vec<f32>>> = vec![None; n];
        node_grads[n - 1] = Some(grad_out);
        let mut scratch = Vec::new();
        let mut dcols = Vec::new();
        for i in (1..n).rev() {
            if !plan.requires_grad[i] {
                node_grads[i] = None;
                continue;
            }
            let Some(g) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            let needs = |j: NodeId| plan.requires_grad[j];
            let act = |j: NodeId| acts[j].as_deref().expect("activation kept for backward");
            let in_shape = self.nodes[node.inputs[0]].shape;
            let trains = node.op.layer().is_some_and(|l| self.layers[l].trainable);

            match node.op {
                Op::Input => {}
                Op::Conv {
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                    ..
                } => {
                    let win = Window::new(in_shape, kernel, stride, padding);
                    let p = win.positions();
                    let kk = kernel * kernel * in_shape.c;
                    let oc = node.shape.c;
                    let x_id = node.inputs[0];
                    if trains {
                        let patches: &[f32] = if win.is_pointwise() {
                            act(x_id)
                        } else {
                            im2col(act(x_id), &win, &mut scratch);
                            &scratch
                        };
                        gemm(kk, p, oc, patches, true, &g, false, 1.0, &mut grads.data[weight]);
                        if let Some(b) = bias {
                            let db = &mut grads.data[b];
                            for row in g.chunks_exact(oc) {
                                for (d, v) in db.iter_mut().zip(row) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    if needs(x_id) {
                        let w = &self.params[weight].data;
                        let dx = node_grads[x_id].get_or_insert_with(|| vec![0.0; in_shape.len()]);
                        if win.is_pointwise() {
                            gemm(p, oc, kk, &g, false, w, true, 1.0, dx);
                        } else {
                            dcols.clear();
                            dcols.resize(p * kk, 0.0);
                            gemm(p, oc, kk, &g, false, w, true, 0.0, &mut dcols);
                            col2im(&dcols, &win, dx);
                        }
                    }
                }
                Op::Depthwise {
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                    ..
                } => {
                    let win = Window::new(in_shape, kernel, stride, padding);
                    let x_id = node.inputs[0];
                    let x = act(x_id);
                    let w = &self.params[weight].data;
                    let mut dx = needs(x_id).then(|| vec![0.0; in_shape.len()]);
                    let (dw, db) = if trains {
                        let (dw_slot, db_slot) = split_two(&mut grads.data, weight, bias);
                        (Some(dw_slot), db_slot)
                    } else {
                        (None, None)
                    };
                    depthwise_backward(x, &win, w, &g, dx.as_deref_mut(), dw, db);
                    if let Some(dx) = dx {
                        accumulate(&mut node_grads[x_id], dx);
                    }
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                    ..
                } => {
                    let c = node.shape.c;
                    let gm = &self.params[gamma].data;
                    let mu = &self.params[mean].data;
                    let inv_std: Vec<f32> = self.params[var].data.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let x_id = node.inputs[0];
                    if trains {
                        let x = act(x_id);
                        let mut dg = vec![0.0f32; c];
                        let mut dbeta = vec![0.0f32; c];
                        for (gp, xp) in g.chunks_exact(c).zip(x.chunks_exact(c)) {
                            for ch in 0..c {
                                dg[ch] += gp[ch] * (xp[ch] - mu[ch]) * inv_std[ch];
                                dbeta[ch] += gp[ch];
                            }
                        }
                        add_into(&mut grads.data[gamma], &dg);
                        add_into(&mut grads.data[beta], &dbeta);
                    }
                    if needs(x_id) {
                        let scale: Vec<f32> = gm.iter().zip(&inv_std).map(|(a, b)| a * b).collect();
                        let dx = node_grads[x_id].get_or_insert_with(|| vec![0.0; in_shape.len()]);
                        for (dp, gp) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                            for ch in 0..c {
                                dp[ch] += gp[ch] * scale[ch];
                            }
                        }
                    }
                }
                Op::Relu | Op::Relu6 => {
                    let x_id = node.inputs[0];
                    if needs(x_id) {
                        let y = act(i);
                        let cap = if matches!(node.op, Op::Relu6) { 6.0 } else { f32::INFINITY };
                        let dx = node_grads[x_id].get_or_insert_with(|| vec![0.0; in_shape.len()]);
                        for ((d, gv), yv) in dx.iter_mut().zip(&g).zip(y) {
                            if *yv > 0.0 && *yv < cap {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Add => {
                    for &j in &node.inputs {
                        if needs(j) {
                            accumulate(&mut node_grads[j], g.clone());
                        }
                    }
                }
                Op::ZeroPad { top, left, .. } => {
                    let x_id = node.inputs[0];
                    if needs(x_id) {
                        let s = in_shape;
                        let w_out = node.shape.w;
                        let dx = node_grads[x_id].get_or_insert_with(|| vec![0.0; s.len()]);
                        for y in 0..s.h {
                            let src = ((y + top) * w_out + left) * s.c;
                            add_into(&mut dx[y * s.w * s.c..(y + 1) * s.w * s.c], &g[src..src + s.w * s.c]);
                        }
                    }
                }
                Op::MaxPool { size, stride, padding } => {
                    let x_id = node.inputs[0];
                    if needs(x_id) {
                        let win = Window::new(in_shape, size, stride, padding);
                        let (_, argmax) = maxpool(act(x_id), &win);
                        let dx = node_grads[x_id].get_or_insert_with(|| vec![0.0; in_shape.len()]);
                        for (gv, &src) in g.iter().zip(&argmax) {
                            dx[src] += gv;
                        }
                    }
                }
            }
        }
    }
}

fn split_two(data: &mut [Vec<f32>], a: ParamId, b: Option<ParamId>) -> (&mut [f32], Option<&mut [f32]>) {
    match b {
        None => (&mut data[a], None),
        Some(b) => {
            assert_ne!(a, b);
            if a < b {
                let (lo, hi) = data.split_at_mut(b);
                (&mut lo[a], Some(&mut hi[0]))
            } else {
                let (lo, hi) = data.split_at_mut(a);
                (&mut hi[0], Some(&mut lo[b]))
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => add_into(acc, &g),
        None => *slot = Some(g),
    }
}

/// Per-channel `(scale, shift)` of inference-mode batch normalisation.
fn bn_affine(gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f32) -> (Vec<f32>, Vec<f32>) {
    let scale: Vec<f32> = gamma.iter().zip(var).map(|(g, v)| g / (v + eps).sqrt()).collect();
    let shift = beta.iter().zip(mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
    (scale, shift)
}

fn depthwise_forward(x: &[f32], win: &Window, w: &[f32], bias: Option<&[f32]>) -> Vec<f32> {
    let Shape { h, w: width, c } = win.input;
    let k = win.kernel;
    let mut out = vec![0.0; win.positions() * c];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let o = &mut out[(oy * win.out_w + ox) * c..][..c];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..k {
                let Some(iy) = win.src(oy, ky, win.pad_top, h) else { continue };
                for kx in 0..k {
                    let Some(ix) = win.src(ox, kx, win.pad_left, width) else { continue };
                    let xs = &x[(iy * width + ix) * c..][..c];
                    let ws = &w[(ky * k + kx) * c..][..c];
                    for ch in 0..c {
                        o[ch] += xs[ch] * ws[ch];
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(
    x: &[f32],
    win: &Window,
    w: &[f32],
    g: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    mut db: Option<&mut [f32]>,
) {
    let Shape { h, w: width, c } = win.input;
    let k = win.kernel;
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let go = &g[(oy * win.out_w + ox) * c..][..c];
            if let Some(db) = db.as_deref_mut() {
                add_into(db, go);
            }
            for ky in 0..k {
                let Some(iy) = win.src(oy, ky, win.pad_top, h) else { continue };
                for kx in 0..k {
                    let Some(ix) = win.src(ox, kx, win.pad_left, width) else { continue };
                    let xo = (iy * width + ix) * c;
                    let wo = (ky * k + kx) * c;
                    if let Some(dw) = dw.as_deref_mut() {
                        for ch in 0..c {
                            dw[wo + ch] += go[ch] * x[xo + ch];
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        for ch in 0..c {
                            dx[xo + ch] += go[ch] * w[wo + ch];
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling; also returns the flat input index chosen for each output.
fn maxpool(x: &[f32], win: &Window) -> (Vec<f32>, Vec<usize>) {
    let Shape { h, w, c } = win.input;
    let n = win.positions() * c;
    let mut out = vec![f32::NEG_INFINITY; n];
    let mut arg = vec![0usize; n];
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let base = (oy * win.out_w + ox) * c;
            for ky in 0..win.kernel {
                let Some(iy) = win.src(oy, ky, win.pad_top, h) else { continue };
                for kx in 0..win.kernel {
                    let Some(ix) = win.src(ox, kx, win.pad_left, w) else { continue };
                    let src = (iy * w + ix) * c;
                    for ch in 0..c {
                        if x[src + ch] > out[base + ch] {
                            out[base + ch] = x[src + ch];
                            arg[base + ch] = src + ch;
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}
