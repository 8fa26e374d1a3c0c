use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use specret_core::{Error, Result};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: p ← p − lr·weight_decay·p each step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows, t.cols))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moments as a parameter store named `m/<param>` and `v/<param>`, for checkpointing.
    pub fn to_store(&self, params: &ParamStore) -> ParamStore {
        let mut s = ParamStore::new(self.step);
        for (id, name, _) in params.iter() {
            s.insert(&format!("m/{name}"), self.m[id.0].clone());
            s.insert(&format!("v/{name}"), self.v[id.0].clone());
        }
        s
    }

    pub fn from_store(store: &ParamStore, params: &ParamStore) -> Result<Self> {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (_, name, t) in params.iter() {
            let get = |k: &str| {
                store
                    .by_name(&format!("{k}/{name}"))
                    .filter(|x| x.shape() == t.shape())
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("optimizer state lacks {k}/{name}")))
            };
            m.push(get("m")?);
            v.push(get("v")?);
        }
        Ok(Self {
            step: store.seed(),
            m,
            v,
        })
    }
}

pub fn adam_step(
    store: &mut ParamStore,
    grads: &HashMap<ParamId, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (id, g) in grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {}",
                store.name(*id)
            )));
        }
        if g.shape() != store.get(*id).shape() {
            return Err(Error::Shape(format!(
                "gradient shape for {}",
                store.name(*id)
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let g = grads.get(&id);
        for k in 0..p.data.len() {
            let gk = g.map_or(0.0, |g| g.data[k]);
            m.data[k] = cfg.beta1 * m.data[k] + (1.0 - cfg.beta1) * gk;
            v.data[k] = cfg.beta2 * v.data[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m.data[k] / bc1;
            let vh = v.data[k] / bc2;
            p.data[k] -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * p.data[k]);
        }
    }
    Ok(())
}
