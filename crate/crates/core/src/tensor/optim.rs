use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Number of completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of a flat slice at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, cfg: &AdamConfig, t: u64) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step to every parameter that has a gradient.
///
/// The whole step is rejected, leaving parameters and state untouched, if any
/// gradient value is non-finite. Frozen rows are skipped entirely.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "optimizer state for {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (id, p) in store.iter() {
        if let Some(g) = grads.get(id) {
            if g.len() != p.tensor.len() {
                return Err(Error::Shape(format!("gradient size for `{}`", p.name)));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    state.t += 1;
    let t = state.t;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let Some(g) = grads.get(id) else { continue };
        let p = store.get_mut(id);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        if p.frozen_rows.is_empty() {
            adam_update(p.tensor.data_mut(), g, m, v, lr, cfg, t);
            continue;
        }
        let rows = p.tensor.shape()[0];
        let w = p.tensor.len() / rows;
        let data = p.tensor.data_mut();
        for r in 0..rows {
            if p.frozen_rows.contains(&r) {
                continue;
            }
            let s = r * w..(r + 1) * w;
            adam_update(
                &mut data[s.clone()],
                &g[s.clone()],
                &mut m[s.clone()],
                &mut v[s],
                lr,
                cfg,
                t,
            );
        }
    }
    Ok(())
}
