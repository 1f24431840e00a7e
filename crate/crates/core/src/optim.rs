//! AdamW with decoupled weight decay, a one-cycle learning-rate schedule
//! and elementwise gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: ParamStore,
    v: ParamStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// entry are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.expect_mut(name);
            let m = self.m.expect_mut(name);
            let v = self.v.expect_mut(name);
            let decay = 1.0 - lr * c.weight_decay;
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Clamp every gradient entry to `[-limit, limit]`.
pub fn clip_elementwise(grads: &mut BTreeMap<String, Tensor>, limit: f64) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v = v.clamp(-limit, limit);
        }
    }
}

/// Linear warm-up from `max_lr / div_factor` to `max_lr` over the first
/// `pct_start` of the run, then linear decay to `max_lr / final_div`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: u64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            max_lr: 2e-4,
            total_steps: 1000,
            pct_start: 0.01,
            div_factor: 25.0,
            final_div: 1e4,
        }
    }
}

impl OneCycle {
    /// Learning rate for zero-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.pct_start * total).max(1.0);
        let start = self.max_lr / self.div_factor;
        let end = self.max_lr / self.final_div;
        let s = step as f64;
        if s < warm {
            start + (self.max_lr - start) * s / warm
        } else {
            let t = ((s - warm) / (total - warm).max(1.0)).min(1.0);
            self.max_lr + (end - self.max_lr) * t
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]));
        s
    }

    #[test]
    fn zero_learning_rate_is_a_null_step() {
        let mut p = store();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let grads = BTreeMap::from([("a".to_string(), Tensor::from_vec(&[3], vec![1.0, -3.0, 0.2]))]);
        opt.update(&mut p, &grads, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn clipping_caps_large_entries() {
        let mut grads = BTreeMap::from([("a".to_string(), Tensor::from_vec(&[3], vec![5.0, -7.0, 0.3]))]);
        clip_elementwise(&mut grads, 1.0);
        assert_eq!(grads["a"].data(), &[1.0, -1.0, 0.3]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = store();
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            &p,
        );
        let grads = BTreeMap::from([("a".to_string(), Tensor::from_vec(&[3], vec![1.0, -1.0, 0.5]))]);
        opt.update(&mut p, &grads, 0.1);
        let d: Vec<f64> = p
            .expect("a")
            .data()
            .iter()
            .zip(store().expect("a").data())
            .map(|(a, b)| a - b)
            .collect();
        for (got, want) in d.iter().zip([-0.1, 0.1, -0.1]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn schedule_peaks_then_decays() {
        let s = OneCycle {
            max_lr: 1.0,
            total_steps: 100,
            pct_start: 0.1,
            ..OneCycle::default()
        };
        assert!((s.lr(0) - 0.04).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!(s.lr(50) < 1.0 && s.lr(50) > s.lr(99));
    }
}
