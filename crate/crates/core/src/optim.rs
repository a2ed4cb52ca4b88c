//! Adam with a fixed learning rate, keyed by parameter-block name.

use std::collections::HashMap;

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update over parallel (name, values) lists. Parameter and gradient
    /// entries must line up one-to-one.
    pub fn update(
        &mut self,
        params: Vec<(String, &mut [f64])>,
        grads: &[(String, &[f64])],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "adam: {} parameter blocks vs {} gradient blocks",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let b1c = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let b2c = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for ((pname, pvals), (gname, gvals)) in params.into_iter().zip(grads) {
            if &pname != gname || pvals.len() != gvals.len() {
                return Err(Error::shape(format!(
                    "adam: mismatched blocks {pname:?}/{gname:?}"
                )));
            }
            let m = self.m.entry(pname.clone()).or_insert_with(|| vec![0.0; pvals.len()]);
            let v = self.v.entry(pname).or_insert_with(|| vec![0.0; pvals.len()]);
            for k in 0..pvals.len() {
                let g = gvals[k];
                m[k] = self.cfg.beta1 * m[k] + (1.0 - self.cfg.beta1) * g;
                v[k] = self.cfg.beta2 * v[k] + (1.0 - self.cfg.beta2) * g * g;
                let mhat = m[k] / b1c;
                let vhat = v[k] / b2c;
                pvals[k] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
