use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::ParameterRegistry;
use crate::error::{Error, Result};

/// Linear warm-up from `warmup_factor * base_lr` to `base_lr`, then cosine
/// annealing from `base_lr` down to `final_lr`.
///
/// The schedule is a function of fractional epoch, so a step `s` of
/// `steps_per_epoch` inside epoch `e` sees `lr(e + s / steps_per_epoch)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_factor: f64,
    pub warmup_epochs: usize,
    pub final_lr: f64,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_factor: 0.2,
            warmup_epochs: 2,
            final_lr: 3.4e-4,
            total_epochs: 16,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr <= self.base_lr) {
            return Err(Error::config(format!(
                "need 0 < final_lr <= base_lr, got final_lr={} base_lr={}",
                self.final_lr, self.base_lr
            )));
        }
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return Err(Error::config(format!(
                "warmup_factor must lie in (0, 1], got {}",
                self.warmup_factor
            )));
        }
        if self.total_epochs == 0 || self.warmup_epochs > self.total_epochs {
            return Err(Error::config(format!(
                "need 0 <= warmup_epochs <= total_epochs and total_epochs > 0, got {} / {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Same shape of schedule stretched over a different number of epochs,
    /// keeping the warm-up share (2 of 16 by default).
    pub fn scaled_to(&self, total_epochs: usize) -> Self {
        let share = self.warmup_epochs as f64 / self.total_epochs as f64;
        Self {
            total_epochs,
            warmup_epochs: ((total_epochs as f64) * share).round() as usize,
            ..*self
        }
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        let warm = self.warmup_epochs as f64;
        let total = self.total_epochs as f64;
        if epoch < warm {
            let frac = epoch / warm;
            return self.base_lr * (self.warmup_factor + (1.0 - self.warmup_factor) * frac);
        }
        let span = total - warm;
        if span <= 0.0 {
            return self.final_lr;
        }
        let progress = ((epoch - warm) / span).clamp(0.0, 1.0);
        self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + (PI * progress).cos())
    }

    pub fn lr_at_step(&self, epoch: usize, step_in_epoch: usize, steps_per_epoch: usize) -> f64 {
        self.lr_at(epoch as f64 + step_in_epoch as f64 / steps_per_epoch.max(1) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per registry entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(registry: &ParameterRegistry, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = registry.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected Adam update at learning rate `lr`. Every parameter
    /// must carry a gradient.
    pub fn step(&mut self, registry: &mut ParameterRegistry, lr: f64) -> Result<()> {
        if self.first.len() != registry.len() {
            return Err(Error::contract(format!(
                "optimizer state tracks {} tensors but registry has {}",
                self.first.len(),
                registry.len()
            )));
        }
        if let Some((name, _)) = registry.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::contract(format!("parameter `{name}` has no gradient")));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (_, t)) in registry.iter_mut().enumerate() {
            let g = t.grad().expect("checked above").to_vec();
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for (((p, gi), mi), vi) in t.values_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::default();
        assert!((s.lr_at(0.0) - 2e-4).abs() < 1e-18);
        assert!((s.lr_at(2.0) - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(16.0) - 3.4e-4).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_linear() {
        let s = LrSchedule::default();
        let mid = s.lr_at(1.0);
        assert!((mid - 0.5 * (2e-4 + 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn cosine_is_monotone_after_warmup() {
        let s = LrSchedule::default();
        let mut prev = s.lr_at(2.0);
        for k in 1..=140 {
            let lr = s.lr_at(2.0 + k as f64 * 0.1);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn scaled_schedule_keeps_warmup_share() {
        let s = LrSchedule::default().scaled_to(128);
        assert_eq!(s.warmup_epochs, 16);
        assert!((s.lr_at(128.0) - 3.4e-4).abs() < 1e-12);
    }

    #[test]
    fn invalid_schedules_rejected() {
        let bad = LrSchedule {
            final_lr: 2e-3,
            ..LrSchedule::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = LrSchedule {
            warmup_factor: 0.0,
            ..LrSchedule::default()
        };
        assert!(bad.validate().is_err());
    }

    fn registry() -> ParameterRegistry {
        let mut r = ParameterRegistry::new();
        r.insert("w", Tensor::row(vec![1.0, -2.0, 3.0])).unwrap();
        r
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut r = registry();
        let before = r.clone();
        let mut adam = AdamState::new(&r, AdamConfig::default());
        for _ in 0..10 {
            r.zero_grad();
            r.accumulate_grad("w", &[0.0; 3]).unwrap();
            adam.step(&mut r, 1e-3).unwrap();
        }
        assert_eq!(r.get("w").unwrap().values(), before.get("w").unwrap().values());
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut r = registry();
        let mut adam = AdamState::new(&r, AdamConfig::default());
        r.accumulate_grad("w", &[0.5, -4.0, 1e-3]).unwrap();
        adam.step(&mut r, 0.1).unwrap();
        let w = r.get("w").unwrap().values();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert!((w[2] - 2.9).abs() < 1e-4);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut r = registry();
        let mut adam = AdamState::new(&r, AdamConfig::default());
        assert!(matches!(adam.step(&mut r, 1e-3), Err(Error::Contract(_))));
    }
}
