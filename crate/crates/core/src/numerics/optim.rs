use std::collections::BTreeMap;

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled (AdamW) weight decay.
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

/// One AdamW update on a flat buffer. `step` is the 1-based step index.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &AdamConfig,
    lr: f32,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        if cfg.weight_decay > 0.0 {
            param[i] -= lr * cfg.weight_decay * param[i];
        }
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    /// Update every parameter of `groups` from its accumulated gradient,
    /// then clear gradients store-wide.
    ///
    /// `lr_of` maps a group name to its learning rate. When `clip` is set the
    /// joint gradient of the updated groups is rescaled to that L2 norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        groups: &[&str],
        lr_of: impl Fn(&str) -> f32,
        clip: Option<f32>,
    ) -> Result<()> {
        for g in groups {
            if store.is_frozen(g) {
                return Err(Error::FrozenGroup(g.to_string()));
            }
        }
        let ids: Vec<_> = store
            .ids()
            .filter(|&id| groups.contains(&store.group(id)))
            .collect();
        let mut sq = 0.0f64;
        for &id in &ids {
            if let Some(g) = store.tensor(id).grad() {
                if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of `{}`[{pos}]", store.name(id)),
                        step: self.step as usize,
                    });
                }
                sq += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
            }
        }
        let factor = match clip {
            Some(c) if sq.sqrt() > c as f64 => (c as f64 / sq.sqrt()) as f32,
            _ => 1.0,
        };
        self.step += 1;
        for id in ids {
            let name = store.name(id).to_string();
            let lr = lr_of(store.group(id));
            let t = store.tensor_mut(id);
            let n = t.len();
            let grad: Vec<f32> = match t.grad() {
                Some(g) => g.iter().map(|x| x * factor).collect(),
                None => vec![0.0; n],
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            adam_update(t.data_mut(), &grad, m, v, self.step, &self.config, lr);
        }
        store.zero_grads();
        Ok(())
    }
}
