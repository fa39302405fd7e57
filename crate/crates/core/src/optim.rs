//! Adam and the inverse-square-root learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `lr · min(1, sqrt(warmup_steps / step))` with steps counted from 1.
pub fn inverse_sqrt_lr(lr: f64, step: u64, warmup_steps: u64) -> f64 {
    let step = step.max(1) as f64;
    lr * (warmup_steps.max(1) as f64 / step).sqrt().min(1.0)
}

/// Linear interpolation of the mask sharpness over `progress ∈ [0, 1]`.
pub fn anneal(k_start: f64, k_end: f64, progress: f64) -> f64 {
    k_start + (k_end - k_start) * progress.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_flat_then_decays() {
        assert_eq!(inverse_sqrt_lr(4e-4, 1, 100), 4e-4);
        assert_eq!(inverse_sqrt_lr(4e-4, 100, 100), 4e-4);
        assert!((inverse_sqrt_lr(4e-4, 400, 100) - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(1);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 2.0)];
            opt.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn anneal_endpoints() {
        assert_eq!(anneal(50.0, 500.0, 0.0), 50.0);
        assert_eq!(anneal(50.0, 500.0, 1.0), 500.0);
        assert_eq!(anneal(50.0, 500.0, 2.0), 500.0);
    }
}
