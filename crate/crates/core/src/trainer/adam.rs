use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every tensor of one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        AdamState { m: zeros(), v: zeros(), step: 0 }
    }
}

/// One bias-corrected Adam update of `params` at step `t` (1-based).
pub fn adam_update<T: Scalar>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::shape("adam_step", "moment/gradient length", params.len(), format!("{}/{}/{}", grads.len(), m.len(), v.len())));
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps, one) = (T::lit(cfg.lr), T::lit(cfg.eps), T::one());
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies the gradients accumulated in `store` (missing buffers count as
/// zero), then clears them.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::shape("adam_step", "tensor count", store.len(), state.m.len()));
    }
    state.step += 1;
    for (i, (_, t)) in store.iter_mut().enumerate() {
        let grads = t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()]);
        adam_update(t.data_mut(), &grads, &mut state.m[i], &mut state.v[i], state.step, cfg)?;
        t.zero_grad();
    }
    Ok(())
}
