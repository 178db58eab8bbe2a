use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Layer, LayerId, LayerKind, Node, NodeId, Op, Param, ParamId, ParamRole};
use super::ops::{out_len, Padding, Shape};
use crate::seed;

/// Incrementally assembles a [`Graph`], initialising parameters as it goes
/// (Glorot-uniform kernels, zero biases, identity batch normalisation).
pub struct GraphBuilder {
    graph: Graph,
    rng: ChaCha8Rng,
    init: KernelInit,
    bias_init: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelInit {
    GlorotUniform,
    /// `U(±√(6/fan_in))`, variance-preserving under ReLU.
    HeUniform,
}

impl GraphBuilder {
    pub fn new(input: Shape, seed: u64) -> Self {
        GraphBuilder {
            graph: Graph {
                nodes: vec![Node {
                    op: Op::Input,
                    inputs: Vec::new(),
                    shape: input,
                }],
                layers: Vec::new(),
                params: Vec::new(),
            },
            rng: seed::rng(seed),
            init: KernelInit::GlorotUniform,
            bias_init: 0.0,
        }
    }

    pub fn with_init(mut self, init: KernelInit) -> Self {
        self.init = init;
        self
    }

    /// Constant for freshly created convolution biases (default 0).
    pub fn with_bias_init(mut self, value: f32) -> Self {
        self.bias_init = value;
        self
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn shape(&self, x: NodeId) -> Shape {
        self.graph.nodes[x].shape
    }

    pub fn finish(self) -> Graph {
        self.graph
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Shape) -> NodeId {
        self.graph.nodes.push(Node { op, inputs, shape });
        self.graph.nodes.len() - 1
    }

    fn layer(&mut self, name: &str, kind: LayerKind) -> LayerId {
        debug_assert!(
            self.graph.layers.iter().all(|l| l.name != name),
            "duplicate layer name {name}"
        );
        self.graph.layers.push(Layer {
            name: name.to_string(),
            kind,
            params: Vec::new(),
            trainable: true,
        });
        self.graph.layers.len() - 1
    }

    fn param(&mut self, layer: LayerId, suffix: &str, shape: Vec<usize>, role: ParamRole, data: Vec<f32>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let name = format!("{}/{}", self.graph.layers[layer].name, suffix);
        self.graph.params.push(Param {
            name,
            shape,
            data,
            role,
            layer,
        });
        let id = self.graph.params.len() - 1;
        self.graph.layers[layer].params.push(id);
        id
    }

    /// Kernel init for a `(kh, kw, in, out)` kernel, fans as Keras computes them.
    fn kernel_init(&mut self, kernel: usize, fan_in_ch: usize, fan_out_ch: usize, len: usize) -> Vec<f32> {
        let receptive = (kernel * kernel) as f64;
        let fans = match self.init {
            KernelInit::GlorotUniform => receptive * (fan_in_ch + fan_out_ch) as f64,
            KernelInit::HeUniform => receptive * fan_in_ch as f64,
        };
        let limit = (6.0 / fans).sqrt() as f32;
        (0..len).map(|_| self.rng.random_range(-limit..limit)).collect()
    }

    fn window_shape(&self, x: NodeId, kernel: usize, stride: usize, padding: Padding, c: usize) -> Shape {
        let s = self.shape(x);
        let (h, _) = out_len(s.h, kernel, stride, padding);
        let (w, _) = out_len(s.w, kernel, stride, padding);
        Shape::new(h, w, c)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        x: NodeId,
        name: &str,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    ) -> NodeId {
        let cin = self.shape(x).c;
        let layer = self.layer(name, LayerKind::Conv);
        let len = kernel * kernel * cin * filters;
        let w = self.kernel_init(kernel, cin, filters, len);
        let weight = self.param(layer, "kernel", vec![kernel, kernel, cin, filters], ParamRole::Weight, w);
        let b0 = self.bias_init;
        let bias = bias.then(|| self.param(layer, "bias", vec![filters], ParamRole::Weight, vec![b0; filters]));
        let shape = self.window_shape(x, kernel, stride, padding, filters);
        self.push(
            Op::Conv {
                layer,
                kernel,
                stride,
                padding,
                weight,
                bias,
            },
            vec![x],
            shape,
        )
    }

    pub fn depthwise(&mut self, x: NodeId, name: &str, kernel: usize, stride: usize, padding: Padding, bias: bool) -> NodeId {
        let c = self.shape(x).c;
        let layer = self.layer(name, LayerKind::DepthwiseConv);
        let w = self.kernel_init(kernel, c, 1, kernel * kernel * c);
        let weight = self.param(layer, "depthwise_kernel", vec![kernel, kernel, c, 1], ParamRole::Weight, w);
        let bias = bias.then(|| self.param(layer, "bias", vec![c], ParamRole::Weight, vec![0.0; c]));
        let shape = self.window_shape(x, kernel, stride, padding, c);
        self.push(
            Op::Depthwise {
                layer,
                kernel,
                stride,
                padding,
                weight,
                bias,
            },
            vec![x],
            shape,
        )
    }

    /// Depthwise then pointwise convolution, counted as a single layer.
    pub fn separable(&mut self, x: NodeId, name: &str, filters: usize, kernel: usize, padding: Padding, bias: bool) -> NodeId {
        let c = self.shape(x).c;
        let layer = self.layer(name, LayerKind::SeparableConv);
        let dw = self.kernel_init(kernel, c, 1, kernel * kernel * c);
        let dw = self.param(layer, "depthwise_kernel", vec![kernel, kernel, c, 1], ParamRole::Weight, dw);
        let pw = self.kernel_init(1, c, filters, c * filters);
        let pw = self.param(layer, "pointwise_kernel", vec![1, 1, c, filters], ParamRole::Weight, pw);
        let bias = bias.then(|| self.param(layer, "bias", vec![filters], ParamRole::Weight, vec![0.0; filters]));
        let mid = self.window_shape(x, kernel, 1, padding, c);
        let d = self.push(
            Op::Depthwise {
                layer,
                kernel,
                stride: 1,
                padding,
                weight: dw,
                bias: None,
            },
            vec![x],
            mid,
        );
        self.push(
            Op::Conv {
                layer,
                kernel: 1,
                stride: 1,
                padding: Padding::Valid,
                weight: pw,
                bias,
            },
            vec![d],
            Shape::new(mid.h, mid.w, filters),
        )
    }

    pub fn bn(&mut self, x: NodeId, name: &str, eps: f32) -> NodeId {
        let s = self.shape(x);
        let c = s.c;
        let layer = self.layer(name, LayerKind::BatchNorm);
        let gamma = self.param(layer, "gamma", vec![c], ParamRole::Weight, vec![1.0; c]);
        let beta = self.param(layer, "beta", vec![c], ParamRole::Weight, vec![0.0; c]);
        let mean = self.param(layer, "moving_mean", vec![c], ParamRole::Statistic, vec![0.0; c]);
        let var = self.param(layer, "moving_variance", vec![c], ParamRole::Statistic, vec![1.0; c]);
        self.push(
            Op::BatchNorm {
                layer,
                gamma,
                beta,
                mean,
                var,
                eps,
            },
            vec![x],
            s,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Relu, vec![x], s)
    }

    pub fn relu6(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x);
        self.push(Op::Relu6, vec![x], s)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "add operands differ in shape");
        self.push(Op::Add, vec![a, b], s)
    }

    pub fn zero_pad(&mut self, x: NodeId, top: usize, bottom: usize, left: usize, right: usize) -> NodeId {
        let s = self.shape(x);
        let shape = Shape::new(s.h + top + bottom, s.w + left + right, s.c);
        self.push(
            Op::ZeroPad {
                top,
                bottom,
                left,
                right,
            },
            vec![x],
            shape,
        )
    }

    pub fn max_pool(&mut self, x: NodeId, size: usize, stride: usize, padding: Padding) -> NodeId {
        let c = self.shape(x).c;
        let shape = self.window_shape(x, size, stride, padding, c);
        self.push(Op::MaxPool { size, stride, padding }, vec![x], shape)
    }
}
