//! Adaptive moment estimation with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MlpParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Moment accumulators for one [`MlpParams`].
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One update of `params` from `grads` (ordered as [`MlpParams::tensors`]).
///
/// Frozen parameters are left bitwise untouched; the step counter advances
/// on every call.
pub fn optimizer_step(
    params: &mut MlpParams,
    grads: Option<&[Tensor]>,
    state: &mut OptimState,
) -> Result<()> {
    if state.first.len() != params.layers.len() * 2 {
        return Err(Error::contract(
            "optimizer state does not mirror the parameter list",
        ));
    }
    if params.frozen {
        state.step += 1;
        return Ok(());
    }
    let grads =
        grads.ok_or_else(|| Error::contract("missing gradient for an unfrozen parameter"))?;
    if grads.len() != state.first.len() {
        return Err(Error::contract(format!(
            "expected {} gradient tensors, got {}",
            state.first.len(),
            grads.len()
        )));
    }
    for ((p, g), m) in params.tensors().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for (((p, &g), m), v) in p
            .values_mut()
            .iter_mut()
            .zip(g.values())
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
