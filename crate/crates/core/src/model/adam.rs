use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Adam with the bias correction folded into the step size, as Keras does:
/// `α_t = lr·√(1−β2^t)/(1−β1^t)`, `θ −= α_t·m/(√v + ε)`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub params: AdamParams,
    t: u32,
    alpha: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub trait Float: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Float for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Float for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Adam {
    /// One moment slot per tensor, sized by `lens`.
    pub fn new(params: AdamParams, lens: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = lens.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Adam {
            params,
            t: 0,
            alpha: 0.0,
            m,
            v,
        }
    }

    /// Advances the step counter; call once per mini-batch before `update`.
    pub fn begin_step(&mut self) {
        self.t += 1;
        let p = &self.params;
        let t = self.t as i32;
        self.alpha = p.learning_rate * (1.0 - p.beta2.powi(t)).sqrt() / (1.0 - p.beta1.powi(t));
    }

    pub fn step_count(&self) -> u32 {
        self.t
    }

    pub fn update<T: Float>(&mut self, slot: usize, theta: &mut [T], grad: &[T]) {
        let AdamParams { beta1, beta2, epsilon, .. } = self.params;
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        assert_eq!(theta.len(), m.len());
        assert_eq!(grad.len(), m.len());
        for i in 0..theta.len() {
            let g = grad[i].to_f64();
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let th = theta[i].to_f64() - self.alpha * m[i] / (v[i].sqrt() + epsilon);
            theta[i] = T::from_f64(th);
        }
    }
}
