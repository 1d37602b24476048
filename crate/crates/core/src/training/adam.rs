use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) decay, applied as `theta *= 1 - lr * weight_decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Contract(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<F> {
    pub t: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros = || params.values().iter().map(|t| vec![F::zero(); t.len()]).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected AdamW update. `None` gradients are treated as zero.
pub fn adam_step<F: Scalar>(
    params: &mut ParamSet<F>,
    grads: &[Option<Vec<F>>],
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(dim_err(
            "adam_step",
            format!("{} parameters, {} gradients, {} moment buffers", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let lit = F::lit;
    let (b1, b2) = (lit(cfg.beta1), lit(cfg.beta2));
    let step = lit(cfg.lr / (1.0 - cfg.beta1.powi(t)));
    let bc2 = lit(1.0 - cfg.beta2.powi(t)).sqrt();
    let decay = lit(1.0 - cfg.lr * cfg.weight_decay);
    let eps = lit(cfg.eps);
    for (i, value) in params.values_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if let Some(g) = &grads[i] {
            if g.len() != value.len() {
                return Err(dim_err("adam_step", format!("gradient {i} has {} entries for {:?}", g.len(), value.shape())));
            }
        }
        let data = value.data_mut();
        for j in 0..data.len() {
            let g = grads[i].as_ref().map_or(F::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (F::one() - b1) * g;
            v[j] = b2 * v[j] + (F::one() - b2) * g * g;
            data[j] = data[j] * decay - step * m[j] / (v[j].sqrt() / bc2 + eps);
        }
    }
    Ok(())
}
