//! Adam with bias correction over a named parameter store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // Desk-scale default; far larger nets want 1e-5.
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators plus the step counter.
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Element> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// One Adam update over `params`, in place. Gradients are keyed by
/// parameter name; a missing entry means zero gradient for that tensor.
pub fn adam_step<T: Element>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let step_size = T::from_f64(cfg.lr / bc1);
    let denom_scale = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(cfg.eps);

    for (name, param) in params.iter_mut() {
        let grad = match grads.get(name) {
            Some(g) => g,
            None => continue,
        };
        if grad.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        if m.shape() != param.shape() || v.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: param.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        for ((p, g), (mv, vv)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = b1 * *mv + one_m_b1 * *g;
            *vv = b2 * *vv + one_m_b2 * *g * *g;
            *p = *p - step_size * *mv / ((*vv).sqrt() * denom_scale + eps);
        }
    }
    Ok(())
}
