use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{GradBuf, ParamGrads};
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    /// Rate for parameters whose name starts with one of
    /// `encoder_prefixes`. Equal to `lr` by default.
    pub lr_encoder: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            lr_encoder: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr_encoder >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

pub const ENCODER_PREFIXES: [&str; 2] = ["embed.", "fusion."];

/// AdamW with decoupled weight decay. Parameters without a gradient entry
/// are updated as if their gradient were zero, so sparse embedding rows
/// follow exactly the dense rule.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = |_| Vec::new();
        AdamW {
            config,
            step: 0,
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let eps = T::from_f64(c.eps);
        for id in params.ids() {
            let lr = if ENCODER_PREFIXES.iter().any(|p| params.name(id).starts_with(p)) {
                c.lr_encoder
            } else {
                c.lr
            };
            let decay = T::from_f64(1.0 - lr * c.weight_decay);
            let step_size = T::from_f64(lr / bc1);
            let inv_bc2 = T::from_f64(1.0 / bc2);
            let p = params.get_mut(id);
            let n = p.numel();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.is_empty() {
                m.resize(n, T::zero());
                v.resize(n, T::zero());
            }
            let dense;
            let g: Option<&[T]> = match grads.get(id) {
                None => None,
                Some(GradBuf::Dense(t)) => Some(t.data()),
                Some(rows @ GradBuf::Rows(_)) => {
                    dense = rows.to_dense(p.shape());
                    Some(dense.data())
                }
            };
            let pd = p.data_mut();
            for k in 0..n {
                let gk = g.map_or(T::zero(), |g| g[k]);
                m[k] = b1 * m[k] + one_b1 * gk;
                v[k] = b2 * v[k] + one_b2 * gk * gk;
                pd[k] *= decay;
                pd[k] -= step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
