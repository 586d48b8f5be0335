//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Archive, ParamStore};
use crate::tensor::scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 1.0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimiser settings {self:?}")))
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads` and returns the pre-clip global
    /// gradient norm. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let vars = store.vars();
        let mut sq = 0.0;
        let mut present = Vec::with_capacity(vars.len());
        for (name, var) in &vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
                present.push((name, var, g.clone()));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("gradient norm is {norm}")));
        }
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var, g) in present {
            let g = if clip != 1.0 { g.affine(clip, 0.0)? } else { g };
            let m = match self.m.get(name) {
                Some(m) => m.affine(c.beta1, 0.0)?.add(&g.affine(1.0 - c.beta1, 0.0)?)?,
                None => g.affine(1.0 - c.beta1, 0.0)?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => v.affine(c.beta2, 0.0)?.add(&g2.affine(1.0 - c.beta2, 0.0)?)?,
                None => g2.affine(1.0 - c.beta2, 0.0)?,
            };
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, c.eps)?;
            let upd = m.affine(c.lr / bc1, 0.0)?.div(&denom)?;
            let theta = var.as_tensor().affine(1.0 - c.lr * c.weight_decay, 0.0)?.sub(&upd)?;
            var.set(&theta.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(norm)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert_scalar("step", self.step as f64);
        for (k, t) in &self.m {
            a.insert_tensor(&format!("m/{k}"), t)?;
        }
        for (k, t) in &self.v {
            a.insert_tensor(&format!("v/{k}"), t)?;
        }
        Ok(a)
    }

    pub fn from_archive(cfg: AdamWConfig, a: &Archive, store: &ParamStore) -> Result<Self> {
        let step = a.scalar("step").ok_or_else(|| Error::State("optimiser state has no step count".into()))? as u64;
        let mut out = Self { cfg, step, m: BTreeMap::new(), v: BTreeMap::new() };
        for (which, map) in [("m", &mut out.m), ("v", &mut out.v)] {
            let sec = a.section(which);
            for name in sec.names() {
                map.insert(name.to_string(), sec.tensor(name, store.dtype())?);
            }
        }
        Ok(out)
    }
}
