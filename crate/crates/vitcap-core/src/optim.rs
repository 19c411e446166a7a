//! AdamW with decoupled weight decay and per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Learning rate for each parameter group at one step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GroupLrs {
    pub stem: f64,
    pub feature: f64,
    pub ctn: f64,
    pub heads: f64,
    pub decoder: f64,
}

impl GroupLrs {
    pub fn uniform(lr: f64) -> GroupLrs {
        GroupLrs {
            stem: lr,
            feature: lr,
            ctn: lr,
            heads: lr,
            decoder: lr,
        }
    }

    /// Second-stage schedule: pretrained stem and concept blocks move at
    /// `base / alpha`, everything else at `base`.
    pub fn staged(base: f64, alpha: f64) -> GroupLrs {
        GroupLrs {
            stem: base / alpha,
            feature: base,
            ctn: base / alpha,
            heads: base,
            decoder: base,
        }
    }

    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Stem => self.stem,
            ParamGroup::Feature => self.feature,
            ParamGroup::Ctn => self.ctn,
            ParamGroup::Heads => self.heads,
            ParamGroup::Decoder => self.decoder,
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("stem", self.stem),
            ("feature", self.feature),
            ("ctn", self.ctn),
            ("heads", self.heads),
            ("decoder", self.decoder),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::config(format!(
                    "learning rate for group {name} must be positive, got {lr}"
                )));
            }
        }
        Ok(())
    }
}

/// Decoupled-decay Adam. The decay term uses the parameter value from the
/// start of the step and is applied together with the moment update:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Result<AdamW<T>> {
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::config(format!(
                "betas must lie in [0, 1), got ({}, {})",
                cfg.beta1, cfg.beta2
            )));
        }
        if !(cfg.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", cfg.eps)));
        }
        if cfg.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "weight decay must be non-negative, got {}",
                cfg.weight_decay
            )));
        }
        Ok(AdamW {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that has a gradient buffer.
    /// Parameters without one (and their moments) are untouched.
    pub fn step(&mut self, set: &mut ParamSet<T>, lrs: &GroupLrs) -> Result<()> {
        lrs.validate()?;
        if self.m.is_empty() {
            self.m = (0..set.len()).map(|_| Vec::new()).collect();
            self.v = (0..set.len()).map(|_| Vec::new()).collect();
        }
        if self.m.len() != set.len() {
            return Err(Error::config(format!(
                "optimizer was built for {} parameters, set has {}",
                self.m.len(),
                set.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let eps = T::from_f64(self.cfg.eps);
        let wd = T::from_f64(self.cfg.weight_decay);

        for idx in 0..set.len() {
            let lr = T::from_f64(lrs.for_group(set.get_at(idx).group));
            let p = set.get_at_mut(idx);
            let Some(grad) = p.tensor.grad.as_ref() else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter {:?}",
                    p.name
                )));
            }
            let n = p.tensor.numel();
            if self.m[idx].is_empty() {
                self.m[idx] = vec![T::zero(); n];
                self.v[idx] = vec![T::zero(); n];
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let grad = p.tensor.grad.as_ref().unwrap().clone();
            let data = p.tensor.data_mut();
            for j in 0..n {
                let g = grad[j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] = data[j] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[j]);
            }
        }
        Ok(())
    }
}
