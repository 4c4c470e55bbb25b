use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Global gradient-norm ceiling.
pub const DEFAULT_CLIP_NORM: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are created lazily per parameter
/// slot.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Advances the step counter; call once before the `update`s of a step.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Updates one parameter slot. Slots must stay aligned across steps.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        assert!(self.step_count > 0, "begin_step must come first");
        assert_eq!(param.len(), grad.len(), "gradient {slot} has the wrong length");
        if slot >= self.m.len() {
            self.m.resize_with(slot + 1, Vec::new);
            self.v.resize_with(slot + 1, Vec::new);
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![0.0; grad.len()];
            self.v[slot] = vec![0.0; grad.len()];
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for j in 0..param.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * grad[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * grad[j] * grad[j];
            param[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
        }
    }

    /// One full step over aligned parameter and gradient lists.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.begin_step();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g);
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients together when their global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_three_four() {
        let mut g = vec![Tensor::vector(vec![3.0, 4.0])];
        assert_eq!(clip_gradients(&mut g, 2.0), 5.0);
        assert!((g[0].data()[0] - 1.2).abs() < 1e-15);
        assert!((g[0].data()[1] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn clip_leaves_small_norm() {
        let mut g = vec![Tensor::vector(vec![0.6, 0.8])];
        clip_gradients(&mut g, 2.0);
        assert_eq!(g[0].data(), &[0.6, 0.8]);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![0.5, -0.5];
        adam.step(&mut [&mut p], &[&[1.0, 1.0]]);
        let expect = 1e-3 / (1.0 + 1e-8);
        assert!((0.5 - p[0] - expect).abs() < 1e-15);
        assert!((-0.5 - p[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = vec![1.0, 2.0];
        adam.step(&mut [&mut p], &[&[0.0, 0.0]]);
        assert_eq!(p, vec![1.0, 2.0]);
    }
}
