use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Adam with decoupled weight decay under a cosine learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    /// Desk-scale schedule for a few thousand steps.
    fn default() -> Self {
        Self {
            lr_start: 1e-2,
            lr_end: 1e-4,
            total_steps: 3000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimizerConfig {
    /// 5e-4 decaying to 5e-6 over 20K steps.
    pub fn paper() -> Self {
        Self {
            lr_start: 5e-4,
            lr_end: 5e-6,
            total_steps: 20_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.total_steps == 0 {
            return Err("optimizer.total_steps must be at least 1".into());
        }
        if !(self.lr_end <= self.lr_start) || self.lr_end < 0.0 {
            return Err("optimizer.lr_end must lie in [0, lr_start]".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("optimizer betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Cosine decay: `lr_start` at step 0, `lr_end` at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_start;
        }
        let t = step.min(self.total_steps - 1) as f64 / (self.total_steps - 1) as f64;
        self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    /// `sizes[i]` is the element count of parameter `i`.
    pub fn new(cfg: OptimizerConfig, sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            cfg,
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// One update with learning rate `lr`; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(&grads[i]).enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.cfg.eps);
                *w -= lr * (update + self.cfg.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let cfg = OptimizerConfig {
            total_steps: 3000,
            ..OptimizerConfig::default()
        };
        assert_eq!(cfg.lr_at(0), cfg.lr_start);
        assert!((cfg.lr_at(2999) - cfg.lr_end).abs() <= 1e-9);
        let mid = cfg.lr_at(1500);
        assert!(mid < cfg.lr_start && mid > cfg.lr_end);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(cfg, &[2]);
        opt.step(&mut [&mut p], &[vec![3.0, -0.5]], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::new(vec![1], vec![5.0]).unwrap();
        let cfg = OptimizerConfig {
            lr_start: 0.1,
            lr_end: 0.001,
            total_steps: 500,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(cfg.clone(), &[1]);
        for s in 0..500 {
            let g = 2.0 * (p.data()[0] - 2.0);
            opt.step(&mut [&mut p], &[vec![g]], cfg.lr_at(s));
        }
        assert!((p.data()[0] - 2.0).abs() < 1e-2);
    }
}
