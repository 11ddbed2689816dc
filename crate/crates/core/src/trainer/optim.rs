use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for the trainable parameters of one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let mut m = BTreeMap::new();
        for p in params.iter().filter(|p| p.trainable) {
            m.insert(p.name.clone(), vec![0.0; p.tensor.numel()]);
        }
        Self {
            config,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn tracks(&self, name: &str) -> bool {
        self.m.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update of every tracked parameter in name order,
    /// then clears all gradients. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for p in params.iter().filter(|p| self.tracks(&p.name)) {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            let (Some(m), Some(v)) = (self.m.get_mut(&p.name), self.v.get_mut(&p.name)) else {
                continue;
            };
            let g = p
                .tensor
                .grad()
                .map_or_else(|| vec![0.0; m.len()], <[f64]>::to_vec);
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}
