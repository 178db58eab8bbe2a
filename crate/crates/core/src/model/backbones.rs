//! Convolutional feature extractors, laid out layer-for-layer like their
//! Keras `applications` counterparts (no top) so that exported ImageNet
//! weights load by name.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::builder::{GraphBuilder, KernelInit};
use super::graph::{Graph, NodeId};
use super::ops::{Padding, Shape};
use crate::error::Error;
use crate::preprocess::{CHANNELS, SIDE};

/// Weight seed of the stub backbone; it never depends on the run seed.
pub const STUB_SEED: u64 = 0x5EED_57B0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneName {
    MobileNetV2,
    ResNet50V2,
    ResNet101V2,
    Xception,
    Stub,
}

impl BackboneName {
    pub const ALL: [BackboneName; 5] = [
        BackboneName::MobileNetV2,
        BackboneName::ResNet50V2,
        BackboneName::ResNet101V2,
        BackboneName::Xception,
        BackboneName::Stub,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::MobileNetV2 => "MobileNetV2",
            BackboneName::ResNet50V2 => "ResNet50V2",
            BackboneName::ResNet101V2 => "ResNet101V2",
            BackboneName::Xception => "Xception",
            BackboneName::Stub => "Stub",
        }
    }

    /// File stem used in the weight cache.
    pub fn weights_stem(self) -> &'static str {
        match self {
            BackboneName::MobileNetV2 => "mobilenet_v2",
            BackboneName::ResNet50V2 => "resnet50v2",
            BackboneName::ResNet101V2 => "resnet101v2",
            BackboneName::Xception => "xception",
            BackboneName::Stub => "stub",
        }
    }

    /// Channel depth of the final feature map.
    pub fn feature_depth(self) -> usize {
        match self {
            BackboneName::MobileNetV2 => 1280,
            BackboneName::ResNet50V2 | BackboneName::ResNet101V2 | BackboneName::Xception => 2048,
            BackboneName::Stub => 32,
        }
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        BackboneName::ALL
            .into_iter()
            .find(|b| b.as_str().to_ascii_lowercase() == norm || b.weights_stem().replace('_', "") == norm)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown backbone `{s}` (expected one of MobileNetV2, ResNet50V2, ResNet101V2, Xception, Stub)"
                ))
            })
    }
}

pub fn input_shape() -> Shape {
    Shape::new(SIDE, SIDE, CHANNELS)
}

/// Builds the backbone graph with freshly initialised parameters.
pub fn build_backbone(name: BackboneName, seed: u64) -> Graph {
    match name {
        BackboneName::Stub => stub(),
        BackboneName::ResNet50V2 => resnet_v2(&[3, 4, 6, 3], seed),
        BackboneName::ResNet101V2 => resnet_v2(&[3, 4, 23, 3], seed),
        BackboneName::MobileNetV2 => mobilenet_v2(seed),
        BackboneName::Xception => xception(seed),
    }
}

/// Three strided valid convolutions, 224 → 56 → 14 → 7, ending at 32 channels.
/// Every convolution feeds a ReLU, so kernels are He-initialised and biases
/// start at a small positive value. With zero biases every feature would be
/// proportional to input brightness, leaving the head no constant feature
/// to build an intercept from.
fn stub() -> Graph {
    let mut b = GraphBuilder::new(input_shape(), STUB_SEED)
        .with_init(KernelInit::HeUniform)
        .with_bias_init(0.1);
    let mut x = b.input();
    for (i, (filters, k)) in [(8, 4), (16, 4), (32, 2)].into_iter().enumerate() {
        x = b.conv(x, &format!("stub_conv{}", i + 1), filters, k, k, Padding::Valid, true);
        x = b.relu(x);
    }
    b.finish()
}

const RESNET_EPS: f32 = 1.001e-5;

fn resnet_block2(b: &mut GraphBuilder, x: NodeId, filters: usize, stride: usize, conv_shortcut: bool, name: &str) -> NodeId {
    let preact = b.bn(x, &format!("{name}_preact_bn"), RESNET_EPS);
    let preact = b.relu(preact);
    let shortcut = if conv_shortcut {
        b.conv(preact, &format!("{name}_0_conv"), 4 * filters, 1, stride, Padding::Valid, true)
    } else if stride > 1 {
        b.max_pool(x, 1, stride, Padding::Valid)
    } else {
        x
    };
    let mut y = b.conv(preact, &format!("{name}_1_conv"), filters, 1, 1, Padding::Valid, false);
    y = b.bn(y, &format!("{name}_1_bn"), RESNET_EPS);
    y = b.relu(y);
    y = b.zero_pad(y, 1, 1, 1, 1);
    y = b.conv(y, &format!("{name}_2_conv"), filters, 3, stride, Padding::Valid, false);
    y = b.bn(y, &format!("{name}_2_bn"), RESNET_EPS);
    y = b.relu(y);
    y = b.conv(y, &format!("{name}_3_conv"), 4 * filters, 1, 1, Padding::Valid, true);
    b.add(shortcut, y)
}

fn resnet_v2(blocks: &[usize; 4], seed: u64) -> Graph {
    let mut b = GraphBuilder::new(input_shape(), seed);
    let mut x = b.zero_pad(b.input(), 3, 3, 3, 3);
    x = b.conv(x, "conv1_conv", 64, 7, 2, Padding::Valid, true);
    x = b.zero_pad(x, 1, 1, 1, 1);
    x = b.max_pool(x, 3, 2, Padding::Valid);
    let stacks = [(64, 2), (128, 2), (256, 2), (512, 1)];
    for (s, (&n, (filters, last_stride))) in blocks.iter().zip(stacks).enumerate() {
        let name = format!("conv{}", s + 2);
        x = resnet_block2(&mut b, x, filters, 1, true, &format!("{name}_block1"));
        for i in 2..n {
            x = resnet_block2(&mut b, x, filters, 1, false, &format!("{name}_block{i}"));
        }
        x = resnet_block2(&mut b, x, filters, last_stride, false, &format!("{name}_block{n}"));
    }
    x = b.bn(x, "post_bn", RESNET_EPS);
    b.relu(x);
    b.finish()
}

const KERAS_BN_EPS: f32 = 1e-3;

/// Padding that centres a stride-2 window on inputs of either parity.
fn correct_pad(side: usize, kernel: usize) -> (usize, usize) {
    let adjust = if side.is_multiple_of(2) { 1 } else { 0 };
    let correct = kernel / 2;
    (correct - adjust, correct)
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) / d).floor() as usize * divisor;
    new_v = new_v.max(divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

fn inverted_res_block(b: &mut GraphBuilder, input: NodeId, expansion: usize, stride: usize, filters: usize, block_id: usize) -> NodeId {
    let in_ch = b.shape(input).c;
    let pointwise = make_divisible(filters as f64, 8);
    let mut x = input;
    let prefix = if block_id > 0 {
        let prefix = format!("block_{block_id}_");
        x = b.conv(x, &format!("{prefix}expand"), expansion * in_ch, 1, 1, Padding::Same, false);
        x = b.bn(x, &format!("{prefix}expand_BN"), KERAS_BN_EPS);
        x = b.relu6(x);
        prefix
    } else {
        "expanded_conv_".to_string()
    };
    let padding = if stride == 2 {
        let s = b.shape(x);
        let (t, bt) = correct_pad(s.h, 3);
        let (l, r) = correct_pad(s.w, 3);
        x = b.zero_pad(x, t, bt, l, r);
        Padding::Valid
    } else {
        Padding::Same
    };
    x = b.depthwise(x, &format!("{prefix}depthwise"), 3, stride, padding, false);
    x = b.bn(x, &format!("{prefix}depthwise_BN"), KERAS_BN_EPS);
    x = b.relu6(x);
    x = b.conv(x, &format!("{prefix}project"), pointwise, 1, 1, Padding::Same, false);
    x = b.bn(x, &format!("{prefix}project_BN"), KERAS_BN_EPS);
    if in_ch == pointwise && stride == 1 {
        x = b.add(input, x);
    }
    x
}

fn mobilenet_v2(seed: u64) -> Graph {
    let mut b = GraphBuilder::new(input_shape(), seed);
    let mut x = b.conv(b.input(), "Conv1", 32, 3, 2, Padding::Same, false);
    x = b.bn(x, "bn_Conv1", KERAS_BN_EPS);
    x = b.relu6(x);
    // (filters, stride, expansion) per block
    let blocks: [(usize, usize, usize); 17] = [
        (16, 1, 1),
        (24, 2, 6),
        (24, 1, 6),
        (32, 2, 6),
        (32, 1, 6),
        (32, 1, 6),
        (64, 2, 6),
        (64, 1, 6),
        (64, 1, 6),
        (64, 1, 6),
        (96, 1, 6),
        (96, 1, 6),
        (96, 1, 6),
        (160, 2, 6),
        (160, 1, 6),
        (160, 1, 6),
        (320, 1, 6),
    ];
    for (id, (filters, stride, expansion)) in blocks.into_iter().enumerate() {
        x = inverted_res_block(&mut b, x, expansion, stride, filters, id);
    }
    x = b.conv(x, "Conv_1", 1280, 1, 1, Padding::Valid, false);
    x = b.bn(x, "Conv_1_bn", KERAS_BN_EPS);
    b.relu6(x);
    b.finish()
}

/// Keras auto-names the unnamed residual projections `conv2d`, `conv2d_1`, ...
fn keras_auto_name(base: &str, i: usize) -> String {
    if i == 0 {
        base.to_string()
    } else {
        format!("{base}_{i}")
    }
}

fn xception(seed: u64) -> Graph {
    let mut b = GraphBuilder::new(input_shape(), seed);
    let mut x = b.conv(b.input(), "block1_conv1", 32, 3, 2, Padding::Valid, false);
    x = b.bn(x, "block1_conv1_bn", KERAS_BN_EPS);
    x = b.relu(x);
    x = b.conv(x, "block1_conv2", 64, 3, 1, Padding::Valid, false);
    x = b.bn(x, "block1_conv2_bn", KERAS_BN_EPS);
    x = b.relu(x);

    let mut auto = 0;
    let mut downsample = |b: &mut GraphBuilder, x: NodeId, block: usize, f1: usize, f2: usize, pre_act: bool| {
        let r = b.conv(x, &keras_auto_name("conv2d", auto), f2, 1, 2, Padding::Same, false);
        let r = b.bn(r, &keras_auto_name("batch_normalization", auto), KERAS_BN_EPS);
        auto += 1;
        let mut y = if pre_act { b.relu(x) } else { x };
        y = b.separable(y, &format!("block{block}_sepconv1"), f1, 3, Padding::Same, false);
        y = b.bn(y, &format!("block{block}_sepconv1_bn"), KERAS_BN_EPS);
        y = b.relu(y);
        y = b.separable(y, &format!("block{block}_sepconv2"), f2, 3, Padding::Same, false);
        y = b.bn(y, &format!("block{block}_sepconv2_bn"), KERAS_BN_EPS);
        y = b.max_pool(y, 3, 2, Padding::Same);
        b.add(y, r)
    };
    x = downsample(&mut b, x, 2, 128, 128, false);
    x = downsample(&mut b, x, 3, 256, 256, true);
    x = downsample(&mut b, x, 4, 728, 728, true);

    for block in 5..13 {
        let residual = x;
        let mut y = x;
        for j in 1..=3 {
            y = b.relu(y);
            y = b.separable(y, &format!("block{block}_sepconv{j}"), 728, 3, Padding::Same, false);
            y = b.bn(y, &format!("block{block}_sepconv{j}_bn"), KERAS_BN_EPS);
        }
        x = b.add(y, residual);
    }

    x = downsample(&mut b, x, 13, 728, 1024, true);
    x = b.separable(x, "block14_sepconv1", 1536, 3, Padding::Same, false);
    x = b.bn(x, "block14_sepconv1_bn", KERAS_BN_EPS);
    x = b.relu(x);
    x = b.separable(x, "block14_sepconv2", 2048, 3, Padding::Same, false);
    x = b.bn(x, "block14_sepconv2_bn", KERAS_BN_EPS);
    b.relu(x);
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_parse() {
        assert_eq!("resnet101v2".parse::<BackboneName>().unwrap(), BackboneName::ResNet101V2);
        assert_eq!("MobileNetV2".parse::<BackboneName>().unwrap(), BackboneName::MobileNetV2);
        assert_eq!("mobilenet_v2".parse::<BackboneName>().unwrap(), BackboneName::MobileNetV2);
        assert_eq!("stub".parse::<BackboneName>().unwrap(), BackboneName::Stub);
        assert!("vgg16".parse::<BackboneName>().is_err());
    }

    #[test]
    fn stub_shape() {
        let g = build_backbone(BackboneName::Stub, 0);
        assert_eq!(g.output_shape(), Shape::new(7, 7, 32));
        assert_eq!(g.layers.len(), 3);
        assert_eq!(g, build_backbone(BackboneName::Stub, 99));
    }

    #[test]
    fn divisible_rounding() {
        assert_eq!(make_divisible(16.0, 8), 16);
        assert_eq!(make_divisible(320.0, 8), 320);
        assert_eq!(make_divisible(12.0, 8), 16);
        assert_eq!(correct_pad(112, 3), (0, 1));
        assert_eq!(correct_pad(7, 3), (1, 1));
    }
}
