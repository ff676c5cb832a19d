//! AdamW with decoupled weight decay and a linear learning-rate warmup.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParameterStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-5,
            warmup_steps: 500,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamWConfig {
    /// `lr * min(1, (step + 1) / warmup)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParameterStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        OptimizerState {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// Apply one AdamW update in place; returns the learning rate used.
pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
) -> Result<f64> {
    let cfg = state.config;
    let lr = cfg.lr_at(state.step);
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for `{name}`")))?;
        let p = params.get_mut(&name).expect("listed parameter");
        let m = state.first_moment.get_mut(&name).expect("moment for parameter");
        let v = state.second_moment.get_mut(&name).expect("moment for parameter");
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::shape("adamw", p.shape(), g.shape()));
        }
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *pv);
        }
    }
    state.step += 1;
    Ok(lr)
}
