//! AdamW with decoupled weight decay and a warmup-then-decay learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lit, ParamTree, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DecayKind {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub decay: DecayKind,
    pub weight_decay: f64,
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    /// Desk-scale pre-training defaults.
    pub fn pretrain() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 100,
            total_steps: 2000,
            decay: DecayKind::Cosine,
            weight_decay: 0.0,
            batch_size: 8,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    /// Desk-scale fine-tuning defaults.
    pub fn finetune() -> Self {
        Self { lr: 3e-5, weight_decay: 1e-5, total_steps: 1000, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::InvalidConfig("optimizer needs lr >= 0, weight decay >= 0, batch and steps >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::InvalidConfig("Adam moments need betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    /// Learning rate used for update number `step` (0-based): linear warmup
    /// to `lr`, then cosine decay to zero at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.decay {
            DecayKind::Constant => self.lr,
            DecayKind::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }
}

/// First and second moments stored in the parameter tree's own shape.
#[derive(Debug, Clone)]
pub struct AdamW<P> {
    pub m: P,
    pub v: P,
    pub step: usize,
}

impl<P: Clone> AdamW<P> {
    pub fn new<F: Real>(params: &P) -> Self
    where
        P: ParamTree<F>,
    {
        Self { m: params.zeroed(), v: params.zeroed(), step: 0 }
    }

    /// One update: `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
    pub fn update<F: Real>(&mut self, params: &mut P, grad: &P, cfg: &OptimConfig)
    where
        P: ParamTree<F>,
    {
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2): (F, F) = (lit(cfg.beta1), lit(cfg.beta2));
        let (one_b1, one_b2): (F, F) = (lit(1.0 - cfg.beta1), lit(1.0 - cfg.beta2));
        let step_size: F = lit(lr / bc1);
        let inv_bc2_sqrt: F = lit(1.0 / bc2.sqrt());
        let eps: F = lit(cfg.eps);
        let decay: F = lit(1.0 - lr * cfg.weight_decay);

        let g = grad.named();
        let mut m = self.m.named_mut();
        let mut v = self.v.named_mut();
        for (i, (_, mut p)) in params.named_mut().into_iter().enumerate() {
            let gi = &g[i].1;
            let mi = &mut m[i].1;
            let vi = &mut v[i].1;
            ndarray::Zip::from(&mut p).and(gi).and(mi).and(vi).for_each(|p, &g, m, v| {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p * decay - step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = OptimConfig { lr: 1.0, warmup_steps: 10, total_steps: 110, ..OptimConfig::pretrain() };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(cfg.lr_at(110).abs() < 1e-12);
        assert!(cfg.lr_at(500).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = Linear::<f64>::zeros(3, 2, true);
        p.weight.fill(0.5);
        let before = p.clone();
        let mut g = p.zeroed();
        g.weight.fill(1.0);
        let cfg = OptimConfig { lr: 0.0, weight_decay: 0.1, ..OptimConfig::pretrain() };
        let mut opt = AdamW::new(&p);
        for _ in 0..5 {
            opt.update(&mut p, &g, &cfg);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Linear::<f64>::zeros(2, 2, false);
        let target = ndarray::arr2(&[[1.0, -2.0], [0.5, 3.0]]);
        let cfg = OptimConfig {
            lr: 0.05,
            warmup_steps: 0,
            total_steps: 2000,
            decay: DecayKind::Constant,
            ..OptimConfig::pretrain()
        };
        let mut opt = AdamW::new(&p);
        for _ in 0..2000 {
            let mut g = p.zeroed();
            g.weight = (&p.weight - &target) * 2.0;
            opt.update(&mut p, &g, &cfg);
        }
        assert!((&p.weight - &target).iter().all(|d| d.abs() < 1e-3));
    }
}
