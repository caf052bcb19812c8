//! Adam with bias correction, and the cosine learning-rate decay used for ψ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_min: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr_min >= 0.0
            && self.lr_min <= self.lr
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Cosine decay from `lr` at step 0 to `lr_min` at step `total - 1`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let frac = step.min(total - 1) as f64 / (total - 1) as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient had a NaN or infinity; nothing changed.
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One Adam update of `params` with learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<StepOutcome> {
        if params.len() != self.m.len() {
            return Err(Error::mismatch(self.m.len(), params.len()));
        }
        if grad.len() != self.m.len() {
            return Err(Error::mismatch(self.m.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            log::warn!("non-finite gradient at optimizer step {}; skipped", self.step + 1);
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params() {
        let mut s = AdamState::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 3.5];
        s.step(&mut p, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = AdamState::new(AdamConfig::default(), 4);
        let mut p = vec![0.0; 4];
        s.step(&mut p, &[3.0, -0.01, 250.0, -7.0], 0.01).unwrap();
        for (x, sign) in p.iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((x - sign * 0.01).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut s = AdamState::new(AdamConfig::default(), 1);
        let mut w = vec![0.0];
        for _ in 0..2000 {
            let g = 2.0 * (w[0] - 3.0);
            s.step(&mut w, &[g], 0.1).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn matches_scalar_reference() {
        // textbook recurrence written out independently
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let grads = [0.3, -1.2, 0.7, 0.0, 2.5, -0.4, 0.9];
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.5f64);
        let mut s = AdamState::new(AdamConfig::default(), 1);
        let mut p = vec![1.5];
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powf(t))) / ((v / (1.0 - b2.powf(t))).sqrt() + eps);
            s.step(&mut p, &[g], lr).unwrap();
            assert!((p[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_grad_skips() {
        let mut s = AdamState::new(AdamConfig::default(), 2);
        let mut p = vec![1.0, 2.0];
        assert_eq!(s.step(&mut p, &[f64::NAN, 1.0], 0.1).unwrap(), StepOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.steps(), 0);
        assert!(s.step(&mut p, &[1.0], 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at(0, 100), 1e-3);
        assert!((c.lr_at(99, 100) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at(0, 1) - 1e-3).abs() < 1e-18);
        let mid = c.lr_at(50, 101);
        assert!((mid - 0.55e-3).abs() < 1e-15);
    }
}
