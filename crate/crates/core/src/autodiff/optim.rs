//! Adam with a cosine-annealed learning rate.

use std::f64::consts::PI;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// `lr(t) = base * 0.5 * (1 + cos(pi * t / T))`, held at 0 for `t >= T`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f64,
    pub total_steps: u64,
    pub step: u64,
    /// First and second moments, indexed like the parameter store.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, base_lr: f64, total_steps: u64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .entries()
            .iter()
            .map(|e| {
                if e.trainable {
                    vec![0.0; e.values.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self {
            base_lr,
            total_steps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }

    /// Apply one update and advance the step counter. Returns the learning rate used.
    pub fn adam_step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Vec<f64>)],
    ) -> Result<f64> {
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let values = store.values_mut(*id);
            if g.len() != values.len() || self.m[i].len() != values.len() {
                return Err(Error::Dimension(format!(
                    "adam: gradient for `{}` has {} entries, parameter {}",
                    i,
                    g.len(),
                    values.len()
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..values.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                values[k] -= lr * mhat / (vhat.sqrt() + EPSILON);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("p", &[n], values);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = store_with(vec![1.0, -2.0]);
        let mut opt = OptimizerState::new(&s, 0.01, 10);
        opt.adam_step(&mut s, &[(id, vec![0.0, 0.0])]).unwrap();
        assert_eq!(s.values(id), &[1.0, -2.0]);
    }

    #[test]
    fn one_step_moves_by_lr_times_sign() {
        let (mut s, id) = store_with(vec![0.0, 0.0]);
        let mut opt = OptimizerState::new(&s, 0.01, 1000);
        let lr = opt.adam_step(&mut s, &[(id, vec![3.0, -0.5])]).unwrap();
        // bias-corrected first step: m̂ = g, v̂ = g², so Δ = lr g / (|g| + ε)
        let expect = |g: f64| -lr * g / (g.abs() + EPSILON);
        assert!((s.values(id)[0] - expect(3.0)).abs() < 1e-15);
        assert!((s.values(id)[1] - expect(-0.5)).abs() < 1e-15);
        assert!((s.values(id)[0] + 0.01).abs() < 1e-8);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert_eq!(cosine_lr(0.1, 100, 100), 0.0);
        assert!(cosine_lr(0.1, 99, 100) < 1e-4);
    }

    #[test]
    fn frozen_after_schedule_end() {
        let (mut s, id) = store_with(vec![1.0]);
        let mut opt = OptimizerState::new(&s, 0.01, 1);
        opt.adam_step(&mut s, &[(id, vec![1.0])]).unwrap();
        let after_first = s.values(id)[0];
        opt.adam_step(&mut s, &[(id, vec![1.0])]).unwrap();
        assert_eq!(s.values(id)[0], after_first);
        assert_eq!(opt.step, 2);
    }
}
