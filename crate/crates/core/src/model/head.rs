//! Regression head: global average pooling → dense(hidden) → dense(1).
//!
//! Runs in `f64`; the backbone hands over pooled features and receives the
//! pooled-feature gradient back.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    GlobalAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub pooling: Pooling,
    pub hidden_units: usize,
    pub hidden_activation: Activation,
    pub output_units: usize,
    pub output_activation: Activation,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            pooling: Pooling::GlobalAverage,
            hidden_units: 1024,
            hidden_activation: Activation::Relu,
            output_units: 1,
            output_activation: Activation::Linear,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_units == 0 {
            return Err(Error::invalid("head hidden_units must be >= 1"));
        }
        if self.output_units != 1 {
            return Err(Error::invalid(format!(
                "head output_units must be 1 for age regression, got {}",
                self.output_units
            )));
        }
        Ok(())
    }

    /// `F·H + H + H + 1`.
    pub fn param_count(&self, features: usize) -> usize {
        features * self.hidden_units + self.hidden_units + self.hidden_units * self.output_units + self.output_units
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub config: HeadConfig,
    pub in_features: usize,
    /// `in_features × hidden`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out_pre: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl HeadGrads {
    pub fn zeros(head: &Head) -> Self {
        HeadGrads {
            w1: vec![0.0; head.w1.len()],
            b1: vec![0.0; head.b1.len()],
            w2: vec![0.0; head.w2.len()],
            b2: 0.0,
        }
    }

    pub fn add(&mut self, other: &HeadGrads) {
        for (a, b) in [(&mut self.w1, &other.w1), (&mut self.b1, &other.b1), (&mut self.w2, &other.w2)] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.b2 += other.b2;
    }
}

impl Head {
    /// Glorot-uniform kernels, zero biases.
    pub fn new(config: HeadConfig, in_features: usize, seed: u64) -> Self {
        let h = config.hidden_units;
        let mut rng = seed::rng(seed);
        let lim1 = (6.0 / (in_features + h) as f64).sqrt();
        let lim2 = (6.0 / (h + 1) as f64).sqrt();
        let w1 = (0..in_features * h).map(|_| rng.random_range(-lim1..lim1)).collect();
        let w2 = (0..h).map(|_| rng.random_range(-lim2..lim2)).collect();
        Head {
            config,
            in_features,
            w1,
            b1: vec![0.0; h],
            w2,
            b2: 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    pub fn forward(&self, x: &[f64]) -> (f64, HeadCache) {
        assert_eq!(x.len(), self.in_features, "head input size");
        let h = self.config.hidden_units;
        let mut pre = self.b1.clone();
        for (xi, row) in x.iter().zip(self.w1.chunks_exact(h)) {
            if *xi == 0.0 {
                continue;
            }
            for (p, w) in pre.iter_mut().zip(row) {
                *p += xi * w;
            }
        }
        let act = self.config.hidden_activation;
        let hidden: Vec<f64> = pre.iter().map(|&v| act.apply(v)).collect();
        let out_pre = self.b2 + hidden.iter().zip(&self.w2).map(|(a, b)| a * b).sum::<f64>();
        let out = self.config.output_activation.apply(out_pre);
        (out, HeadCache { pre, hidden, out_pre })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.forward(x).0
    }

    /// Accumulates parameter gradients for upstream gradient `dy` and
    /// returns the gradient with respect to the input features.
    pub fn backward(&self, x: &[f64], cache: &HeadCache, dy: f64, grads: &mut HeadGrads) -> Vec<f64> {
        let h = self.config.hidden_units;
        let d_out = dy * self.config.output_activation.derivative(cache.out_pre);
        grads.b2 += d_out;
        let act = self.config.hidden_activation;
        let mut d_pre = vec![0.0; h];
        for j in 0..h {
            grads.w2[j] += d_out * cache.hidden[j];
            d_pre[j] = d_out * self.w2[j] * act.derivative(cache.pre[j]);
            grads.b1[j] += d_pre[j];
        }
        let mut dx = vec![0.0; self.in_features];
        for (i, (xi, row)) in x.iter().zip(self.w1.chunks_exact(h)).enumerate() {
            let grow = &mut grads.w1[i * h..(i + 1) * h];
            let mut acc = 0.0;
            for j in 0..h {
                grow[j] += xi * d_pre[j];
                acc += row[j] * d_pre[j];
            }
            dx[i] = acc;
        }
        dx
    }

    /// Flat views used by the optimiser and persistence.
    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, std::slice::from_mut(&mut self.b2)]
    }
}

impl HeadGrads {
    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, std::slice::from_ref(&self.b2)]
    }
}
