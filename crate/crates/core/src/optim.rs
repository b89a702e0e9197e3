//! First-order optimizers with per-parameter state keyed by name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

impl Schedule {
    /// Multiplier for step `t` of `total` (0-based).
    pub fn factor(self, t: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine if total == 0 => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            lr: 0.03,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::config("momentum and beta terms must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub cfg: OptimConfig,
    pub steps: u64,
    /// Learning-rate multiplier of the current step.
    pub lr_scale: f64,
    pub slots: BTreeMap<String, Slot>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            lr_scale: 1.0,
            slots: BTreeMap::new(),
        }
    }

    /// Call once per training step before the parameter updates.
    pub fn begin_step(&mut self) {
        self.begin_scaled_step(1.0);
    }

    pub fn begin_scaled_step(&mut self, lr_scale: f64) {
        self.steps += 1;
        self.lr_scale = lr_scale;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        let c = &self.cfg;
        let lr = c.lr * self.lr_scale;
        let n = param.len();
        let slot = self.slots.entry(name.to_string()).or_default();
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Momentum => {
                slot.m.resize(n, 0.0);
                for ((p, g), m) in param.iter_mut().zip(grad).zip(slot.m.iter_mut()) {
                    *m = c.momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerKind::Adam => {
                slot.m.resize(n, 0.0);
                slot.v.resize(n, 0.0);
                let t = self.steps.max(1) as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for i in 0..n {
                    let g = grad[i];
                    slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
                    slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
                    let mh = slot.m[i] / bc1;
                    let vh = slot.v[i] / bc2;
                    param[i] -= lr * mh / (vh.sqrt() + c.eps);
                }
            }
        }
    }

    /// Apply a rank-slot selection to the state of an adapter's factors:
    /// `a` is `r x inp` (rows are slots), `b` is `out x r` (columns are slots).
    pub fn select_slots(&mut self, a_name: &str, b_name: &str, kept: &[usize], r: usize, inp: usize, out: usize) {
        let remap_rows = |buf: &mut Vec<f64>| {
            if buf.len() != r * inp {
                return;
            }
            let old = std::mem::replace(buf, vec![0.0; r * inp]);
            for (new, &o) in kept.iter().enumerate() {
                buf[new * inp..(new + 1) * inp].copy_from_slice(&old[o * inp..(o + 1) * inp]);
            }
        };
        if let Some(s) = self.slots.get_mut(a_name) {
            remap_rows(&mut s.m);
            remap_rows(&mut s.v);
        }
        let remap_cols = |buf: &mut Vec<f64>| {
            if buf.len() != out * r {
                return;
            }
            let old = std::mem::replace(buf, vec![0.0; out * r]);
            for j in 0..out {
                for (new, &o) in kept.iter().enumerate() {
                    buf[j * r + new] = old[j * r + o];
                }
            }
        };
        if let Some(s) = self.slots.get_mut(b_name) {
            remap_cols(&mut s.m);
            remap_cols(&mut s.v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut o = Optimizer::new(OptimConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.5,
            ..OptimConfig::default()
        });
        let mut p = vec![1.0, 2.0];
        o.begin_step();
        o.update("p", &mut p, &[1.0, -2.0]);
        assert_eq!(p, vec![0.5, 3.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut o = Optimizer::new(OptimConfig {
            lr: 1.0,
            ..OptimConfig::default()
        });
        let mut p = vec![0.0];
        o.begin_step();
        o.update("p", &mut p, &[1.0]);
        o.begin_step();
        o.update("p", &mut p, &[1.0]);
        assert!((p[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut o = Optimizer::new(OptimConfig::adam(0.1));
        let mut p = vec![0.0, 0.0];
        o.begin_step();
        o.update("p", &mut p, &[3.0, -0.01]);
        assert!((p[0] + 0.1).abs() < 1e-6 && (p[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn slot_selection_moves_state() {
        let mut o = Optimizer::new(OptimConfig::default());
        o.slots.insert("a".into(), Slot { m: vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0], v: vec![] });
        o.slots.insert("b".into(), Slot { m: vec![1.0, 2.0, 3.0], v: vec![] });
        o.select_slots("a", "b", &[2, 0], 3, 2, 1);
        assert_eq!(o.slots["a"].m, vec![3.0, 3.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(o.slots["b"].m, vec![3.0, 1.0, 0.0]);
    }
}
