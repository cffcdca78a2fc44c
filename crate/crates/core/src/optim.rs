//! AdamW with decoupled weight decay, and a warmup + cosine schedule.

use std::collections::BTreeMap;

use crate::config::{OptimizerConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Linear warmup from `start_lr` to `base_lr`, then a half cosine down to
/// `min_lr`, reached exactly at step `total_steps - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub start_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub cosine: bool,
}

impl CosineSchedule {
    pub fn new(opt: &OptimizerConfig, sched: &ScheduleConfig, steps_per_epoch: u64) -> Self {
        CosineSchedule {
            base_lr: opt.lr,
            min_lr: sched.min_lr,
            start_lr: sched.warmup_start_lr,
            warmup_steps: sched.warmup_epochs as u64 * steps_per_epoch,
            total_steps: (sched.total_epochs as u64 * steps_per_epoch).max(1),
            cosine: sched.cosine,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.start_lr + (self.base_lr - self.start_lr) * frac;
        }
        if !self.cosine {
            return self.base_lr;
        }
        let last = self.total_steps - 1;
        let span = last.saturating_sub(self.warmup_steps);
        let p = if span == 0 {
            1.0
        } else {
            ((step - self.warmup_steps) as f64 / span as f64).min(1.0)
        };
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken so far (bias correction uses `t + 1` on the next step).
    pub t: u64,
    pub m: BTreeMap<String, Vec<Scalar>>,
    pub v: BTreeMap<String, Vec<Scalar>>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter holding a gradient.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = p.grad.take() else { continue };
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                    index: i,
                });
            }
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = (1.0 - lr * self.weight_decay) as Scalar;
            let (b1, b2) = (self.beta1 as Scalar, self.beta2 as Scalar);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] as f64 / c1;
                let vh = v[i] as f64 / c2;
                *w = *w * decay - (lr * mh / (vh.sqrt() + self.eps)) as Scalar;
            }
            p.grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sched() -> CosineSchedule {
        CosineSchedule::new(&OptimizerConfig::default(), &ScheduleConfig::default(), 10)
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(s.lr(0), 1e-6);
        assert!((s.lr(50) - 1e-4).abs() < 1e-12);
        assert!((s.lr(999) - 1e-6).abs() < 1e-9);
        let mid = 50 + (999 - 50) / 2;
        let p = (mid - 50) as f64 / 949.0;
        let expect = 1e-6 + 0.5 * (1e-4 - 1e-6) * (1.0 + (std::f64::consts::PI * p).cos());
        assert!((s.lr(mid) - expect).abs() < 1e-15);
    }

    #[test]
    fn schedule_monotone_after_warmup() {
        let s = sched();
        for t in 50..999 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }

    #[test]
    fn adamw_first_step_matches_hand_value() {
        // First step: m̂ = g, v̂ = g², so the move is lr·g/(|g|+eps) plus decay.
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        ps.get_mut("w").unwrap().grad = Some(vec![0.5, -0.25]);
        let mut opt = AdamW::new(&OptimizerConfig::default());
        opt.step(&mut ps, 0.1).unwrap();
        let w = ps.get("w").unwrap().data();
        let e0 = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        let e1 = -2.0 * (1.0 - 0.1 * 0.01) + 0.1 * 0.25 / (0.25 + 1e-8);
        assert!((w[0] as f64 - e0).abs() < 1e-6);
        assert!((w[1] as f64 - e1).abs() < 1e-6);
    }

    #[test]
    fn adamw_rejects_nan_gradient() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::zeros(&[1]));
        ps.get_mut("w").unwrap().grad = Some(vec![Scalar::NAN]);
        let mut opt = AdamW::new(&OptimizerConfig::default());
        assert!(matches!(opt.step(&mut ps, 0.1), Err(Error::NonFinite { .. })));
    }
}
