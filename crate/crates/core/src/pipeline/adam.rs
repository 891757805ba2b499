use std::collections::BTreeMap;

use crate::nn::ParamStore;
use crate::{Error, Real, Result};

pub const BETA1: Real = 0.9;
pub const BETA2: Real = 0.999;
pub const EPSILON: Real = 1e-8;

/// First and second moment estimates per parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<Real>>,
    v: BTreeMap<String, Vec<Real>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update of every trainable parameter, with decoupled weight
/// decay applied first: `p ← p·(1 − lr·wd)`, then the bias-corrected Adam
/// step. Trainable parameters without an entry in `grads` see a zero
/// gradient. Any non-finite gradient aborts before anything is modified.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<Real>>,
    state: &mut AdamState,
    lr: Real,
    weight_decay: Real,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.numel() != g.len() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                p.numel()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFault(format!("non-finite gradient for `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    let names: Vec<String> = params.trainable().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let p = params.get_mut(&name)?;
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let g = grads.get(&name);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
