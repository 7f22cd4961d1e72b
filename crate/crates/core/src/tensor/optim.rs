use std::collections::BTreeMap;

use super::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2-norm clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Parameters sharing one learning rate.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub params: Vec<ParamId>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Adam without weight decay, with optional global-norm clipping applied
/// to the raw gradients before the moment update.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    lr: BTreeMap<ParamId, f64>,
    state: BTreeMap<ParamId, Moments>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        if let Some(c) = config.clip_norm {
            if c <= 0.0 || !c.is_finite() {
                return Err(Error::invalid(format!("clip norm {c} must be positive")));
            }
        }
        let mut lr = BTreeMap::new();
        for group in groups {
            if group.lr <= 0.0 || !group.lr.is_finite() {
                return Err(Error::invalid(format!(
                    "learning rate {} must be positive",
                    group.lr
                )));
            }
            for id in group.params {
                lr.insert(id, group.lr);
            }
        }
        Ok(Adam {
            config,
            lr,
            state: BTreeMap::new(),
            steps: 0,
        })
    }

    pub fn tracks(&self, id: ParamId) -> bool {
        self.lr.contains_key(&id)
    }

    /// Parameters that currently hold moment state.
    pub fn state_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.state.keys().copied()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<StepStats> {
        let tracked: Vec<(ParamId, &[f64])> = grads
            .params()
            .filter(|(id, _)| self.tracks(*id))
            .map(|(id, g)| (id, g.data()))
            .collect();
        let grad_norm = tracked
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { op: "adam_step" });
        }
        let clip_scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (id, g) in tracked {
            let lr = self.lr[&id];
            let n = g.len();
            let mom = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let param = store.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g[i] * clip_scale;
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                param[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepStats {
            grad_norm,
            clip_scale,
        })
    }
}
