use serde::{Deserialize, Serialize};

use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

/// Adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, len: usize) -> Self {
        Adam {
            cfg,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let c1 = T::one() - T::of(self.cfg.beta1.powi(self.step as i32));
        let c2 = T::one() - T::of(self.cfg.beta2.powi(self.step as i32));
        let lr = T::of(self.cfg.lr);
        let eps = T::of(self.cfg.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            if self.cfg.lr != 0.0 {
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                params[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        let mut x = vec![3.0f64, -2.0];
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
            2,
        );
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.update(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut x = vec![1.5f32, -0.25];
        let before = x.clone();
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            2,
        );
        opt.update(&mut x, &[10.0, -3.0]);
        assert_eq!(x, before);
    }
}
