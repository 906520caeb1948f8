//! Adam with per-tensor gradient normalisation and a step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VncaError};
use crate::linalg::l2_norm;
use crate::nca::RuleParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f32,
    /// Fractions of the total epoch count at which the rate is multiplied by `factor`.
    pub milestones: Vec<f32>,
    pub factor: f32,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-3,
            milestones: vec![0.6, 0.85],
            factor: 0.3,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize, total_epochs: usize) -> f32 {
        let progress = if total_epochs == 0 {
            0.0
        } else {
            (epoch as f64 / total_epochs as f64) as f32
        };
        let passed = self.milestones.iter().filter(|&&m| progress >= m).count();
        self.base * self.factor.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(VncaError::Config(format!("learning rate must be positive, got {}", self.base)));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(VncaError::Config(format!("decay factor must be in (0, 1], got {}", self.factor)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: RuleParams,
    v: RuleParams,
}

impl Adam {
    pub fn new(like: &RuleParams) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }

    /// Rescales each gradient tensor to unit L2 norm. Zero tensors stay zero.
    pub fn normalize(grads: &mut RuleParams) {
        for (_, g) in grads.tensors_mut() {
            let n = l2_norm(g);
            if n > 0.0 {
                g.iter_mut().for_each(|v| *v /= n + 1e-8);
            }
        }
    }

    /// Applies one update and returns the L2 norm of the parameter change.
    pub fn update(&mut self, params: &mut RuleParams, grads: &RuleParams, lr: f32) -> Result<f32> {
        if !grads.is_finite() {
            return Err(VncaError::NonFinite {
                term: "parameter gradient".into(),
                index: 0,
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut change = 0.0f64;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let ps = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((_, p), (_, m)), ((_, v), (_, g))) in ps.into_iter().zip(ms).zip(vs.into_iter().zip(grads.tensors())) {
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let delta = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= delta;
                change += (delta as f64).powi(2);
            }
        }
        Ok(change.sqrt() as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down() {
        let s = LrSchedule::default();
        assert_eq!(s.rate(0, 100), 1e-3);
        assert_eq!(s.rate(59, 100), 1e-3);
        assert!((s.rate(60, 100) - 3e-4).abs() < 1e-9);
        assert!((s.rate(90, 100) - 9e-5).abs() < 1e-9);
    }

    #[test]
    fn normalized_tensors_have_unit_norm() {
        let mut g = RuleParams::zeros(3, 2, 4);
        g.w1.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        g.b2[1] = -5.0;
        Adam::normalize(&mut g);
        assert!((l2_norm(&g.w1) - 1.0).abs() < 1e-6);
        assert!((l2_norm(&g.b2) - 1.0).abs() < 1e-6);
        assert_eq!(l2_norm(&g.b1), 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = RuleParams::zeros(3, 2, 4);
        p.w1[0] = 0.7;
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let zero = p.zeros_like();
        let change = adam.update(&mut p, &zero, 1e-3).unwrap();
        assert_eq!(change, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = RuleParams::zeros(1, 1, 1);
        let mut g = p.zeros_like();
        g.w1[0] = 0.25;
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &g, 1e-2).unwrap();
        assert!((p.w1[0] + 1e-2).abs() < 1e-6);
    }
}
