//! Decoupled-weight-decay Adam and the one-cycle learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{reject, Result};
use crate::params::{GradBuffer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Mat;

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
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    m: Vec<Mat<T>>,
    v: Vec<Mat<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || store.entries().iter().map(|e| Mat::zeros(e.value.rows, e.value.cols)).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. Frozen entries are left untouched; decay applies only where the
    /// entry is marked for it.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.cfg.eps);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.frozen {
                continue;
            }
            let g = &grads.grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = if entry.decay { T::of(1.0 - lr * self.cfg.weight_decay) } else { T::one() };
            for (((p, &gi), mi), vi) in entry.value.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *mi = tb1 * *mi + one_b1 * gi;
                *vi = tb2 * *vi + one_b2 * gi * gi;
                *p = *p * decay - step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Cosine warm-up from `base` to `peak`, then cosine annealing to `final_lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneCycle {
    pub base: f64,
    pub peak: f64,
    pub final_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl OneCycle {
    pub fn new(base: f64, peak: f64, final_lr: f64, total_steps: usize, warmup_frac: f64) -> Result<Self> {
        if !(base > 0.0 && peak >= base && final_lr > 0.0 && final_lr <= peak) {
            return reject(format!("learning rates must satisfy 0 < base <= peak, 0 < final <= peak (got {base}, {peak}, {final_lr})"));
        }
        if total_steps == 0 || !(0.0..=1.0).contains(&warmup_frac) {
            return reject("schedule needs at least one step and warmup fraction in [0, 1]");
        }
        let warmup_steps = ((total_steps as f64 * warmup_frac).round() as usize).clamp(1, total_steps);
        Ok(Self { base, peak, final_lr, total_steps, warmup_steps })
    }

    pub fn lr(&self, step: usize) -> f64 {
        use std::f64::consts::PI;
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.base + (self.peak - self.base) * 0.5 * (1.0 - (PI * t).cos());
        }
        let rest = (self.total_steps - self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / rest).min(1.0);
        self.final_lr + (self.peak - self.final_lr) * 0.5 * (1.0 + (PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, StoreKind};

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = OneCycle::new(1e-4, 5e-4, 1e-6, 1000, 0.3).unwrap();
        assert_eq!(s.lr(0), 1e-4);
        let lrs: Vec<f64> = (0..1000).map(|i| s.lr(i)).collect();
        let max = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 5e-4).abs() < 1e-9);
        for i in 1..s.warmup_steps {
            assert!(lrs[i] >= lrs[i - 1]);
        }
        for i in s.warmup_steps + 1..1000 {
            assert!(lrs[i] <= lrs[i - 1]);
        }
        assert!(OneCycle::new(5e-4, 1e-4, 1e-6, 10, 0.3).is_err());
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let mut store = ParamStore::<f64>::new(StoreKind::Model);
        let a = Init::new(&mut store, 1, "a").normal("w", 2, 2, 1.0, true);
        let b = Init::new(&mut store, 1, "b").normal("w", 2, 2, 1.0, true);
        store.entries_mut()[b.index as usize].frozen = true;
        let before_b = store.get(b).clone();
        let before_a = store.get(a).clone();
        let mut grads = GradBuffer::zeros_like(&store);
        for g in grads.grads.iter_mut() {
            g.data.iter_mut().for_each(|x| *x = 1.0);
        }
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, &grads, 1e-2);
        assert_eq!(store.get(b), &before_b);
        assert_ne!(store.get(a), &before_a);
    }
}
