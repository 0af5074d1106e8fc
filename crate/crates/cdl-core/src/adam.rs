//! Adam with bias correction.

use std::collections::HashMap;

use crate::error::{CdlError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::GradMap;
use crate::tensor::Tensor;

/// Per-parameter optimizer state plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], lr: f64) -> AdamState {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update: returns the new parameter value and advanced state.
pub fn adam_step(param: &Tensor, grad: &Tensor, state: &AdamState) -> Result<(Tensor, AdamState)> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(CdlError::Contract(format!(
            "adam_step shape mismatch: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    let t = state.t + 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let n = param.numel();
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad.data()[i];
        let mi = b1 * state.m.data()[i] + (1.0 - b1) * g;
        let vi = b2 * state.v.data()[i] + (1.0 - b2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        m.push(mi);
        v.push(vi);
        out.push(param.data()[i] - state.lr * m_hat / (v_hat.sqrt() + state.eps));
    }
    Ok((
        Tensor::from_vec(param.shape().to_vec(), out),
        AdamState {
            m: Tensor::from_vec(param.shape().to_vec(), m),
            v: Tensor::from_vec(param.shape().to_vec(), v),
            t,
            ..*state
        },
    ))
}

/// Optimizer over a parameter store; state is created lazily per parameter.
#[derive(Debug)]
pub struct AdamOpt {
    pub lr: f64,
    states: HashMap<ParamId, AdamState>,
}

impl AdamOpt {
    /// Learning rate defaults to 0.001.
    pub fn new(lr: f64) -> AdamOpt {
        AdamOpt { lr, states: HashMap::new() }
    }

    /// Applies one step to every parameter present in the gradient map.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<()> {
        // Fixed order so any fallible path triggers deterministically.
        let mut ids: Vec<ParamId> = grads.iter().map(|(id, _)| id).collect();
        ids.sort();
        for id in ids {
            let grad = grads.get(id).unwrap();
            let state = self
                .states
                .entry(id)
                .or_insert_with(|| AdamState::new(store.value(id).shape(), self.lr));
            let (new_param, new_state) = adam_step(store.value(id), grad, state)?;
            *state = new_state;
            store.set_value(id, new_param);
        }
        Ok(())
    }

    pub fn state(&self, id: ParamId) -> Option<&AdamState> {
        self.states.get(&id)
    }
}
