//! Adam with bias correction over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn restore(config: AdamConfig, m: Vec<f32>, v: Vec<f32>, step: u64) -> Self {
        Self { config, m, v, step }
    }

    /// In-place update of `params` against `grad`.
    pub fn apply(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.step += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let t = self.step as i32;
        let step = (lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t))) as f32;
        let eps_hat = (self.config.eps * (1.0 - b2.powi(t)).sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps_hat);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = Adam::new(3, AdamConfig { eps: 0.0, ..AdamConfig::default() });
        let mut p = [1.0f32, -2.0, 0.5];
        opt.apply(&mut p, &[0.3, -4.0, 1e-3], 0.01);
        for (a, b) in p.iter().zip([0.99f32, -1.99, 0.49]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(2, AdamConfig::default());
        let mut p = [3.0f32, -1.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 4.0 * (p[1] + 0.5)];
            opt.apply(&mut p, &g, 0.01);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }
}
