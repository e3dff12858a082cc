//! Adam with linear warmup and an optional cosine decay.

use crate::numerics::{Scalar, Tensor};
use crate::param::{ParamGroup, Parameters};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Learning rate at `step` (0-based) out of `total` steps.
pub fn lr_at(base: f64, step: usize, total: usize, warmup_ratio: f64, schedule: Schedule) -> f64 {
    let warmup = ((total as f64 * warmup_ratio).ceil() as usize).min(total);
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let rest = (total - warmup).max(1);
            let progress = (step - warmup) as f64 / rest as f64;
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

struct Slot<S> {
    m: Tensor<S>,
    v: Tensor<S>,
}

/// Adam keyed by parameter visitation order (which is fixed), updating only
/// the active groups. Frozen parameters keep their state untouched.
pub struct Adam<S: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    slots: Vec<Slot<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut dyn Parameters<S>, active: &[ParamGroup], lr: f64) {
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let bias1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bias2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(self.eps);

        let mut idx = 0usize;
        let slots = &mut self.slots;
        params.visit_params(&mut |group, _name, p| {
            if slots.len() == idx {
                slots.push(Slot {
                    m: Tensor::zeros(p.value.shape().to_vec()),
                    v: Tensor::zeros(p.value.shape().to_vec()),
                });
            }
            if active.contains(&group) {
                let slot = &mut slots[idx];
                let g = p.grad.data();
                let m = slot.m.data_mut();
                let v = slot.v.data_mut();
                let w = p.value.data_mut();
                for i in 0..g.len() {
                    m[i] = b1 * m[i] + one_m_b1 * g[i];
                    v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                    let mhat = m[i] / bias1;
                    let vhat = v[i] / bias2;
                    w[i] = w[i] - lr_s * mhat / (vhat.sqrt() + eps);
                }
            }
            idx += 1;
        });
    }
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let total = 100;
        let base = 1.0;
        let w = lr_at(base, 0, total, 0.03, Schedule::Cosine);
        assert!(w > 0.0 && w <= base / 3.0 + 1e-9);
        let peak = lr_at(base, 3, total, 0.03, Schedule::Cosine);
        assert!(peak > 0.9);
        let end = lr_at(base, 99, total, 0.03, Schedule::Cosine);
        assert!(end < 0.01);
    }
}
