//! Central finite-difference gradient verification.

use crate::error::{CdlError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Worst-case result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked_params: usize,
}

/// A loss construction that can be re-evaluated under perturbed parameters.
pub type LossBuilder<'a> = dyn FnMut(&ParamStore, &mut Tape) -> Result<TensorId> + 'a;

fn eval_loss(builder: &mut LossBuilder, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = builder(store, &mut tape)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(CdlError::Contract(format!(
            "loss builder produced shape {:?}, expected scalar",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares analytic gradients against central differences for every
/// coordinate of every trainable parameter in the store.
///
/// Relative error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
/// i.e. absolute for sub-unit gradients and relative above that. Frozen
/// parameters are skipped. Parameter values are restored before returning.
pub fn finite_difference_check(
    builder: &mut LossBuilder,
    store: &mut ParamStore,
    eps: f64,
) -> Result<FdReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(CdlError::Contract(format!(
            "finite-difference step {eps} outside [1e-6, 1e-3]"
        )));
    }

    // Determinism probe: the same parameters must give the same loss bits.
    let l0 = eval_loss(builder, store)?;
    let l1 = eval_loss(builder, store)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(CdlError::Determinism(format!(
            "loss builder is not deterministic: {l0} vs {l1}"
        )));
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let loss = builder(store, &mut tape)?;
    let grads = tape.backward(loss)?;

    let trainable: Vec<ParamId> = store.ids().filter(|&id| store.trainable(id)).collect();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked_params: trainable.len(),
    };

    for &id in &trainable {
        let base = store.value(id).clone();
        let shape = base.shape().to_vec();
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape));
        for i in 0..base.numel() {
            let mut plus = base.data().to_vec();
            plus[i] += eps;
            store.set_value(id, Tensor::from_vec(shape.clone(), plus));
            let lp = eval_loss(builder, store)?;

            let mut minus = base.data().to_vec();
            minus[i] -= eps;
            store.set_value(id, Tensor::from_vec(shape.clone(), minus));
            let lm = eval_loss(builder, store)?;

            store.set_value(id, base.clone());

            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / f64::max(1.0, f64::max(a.abs(), numeric.abs()));
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn linear_loss_is_exact() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::from_vec(vec![3], vec![0.3, -1.2, 2.0]), true);
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]);
        let mut builder = |s: &ParamStore, t: &mut Tape| {
            let wid = t.param(s, w);
            let xid = t.constant(&x);
            let prod = t.mul(wid, xid);
            Ok(t.sum_all(prod))
        };
        let report = finite_difference_check(&mut builder, &mut store, 1e-5).unwrap();
        assert!(report.max_rel_err <= 1e-10, "err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_under_1e6() {
        let mut rng = SeededRng::new(5);
        let mut store = ParamStore::new();
        let z = store.insert("z", Tensor::rand_uniform(&[6], -2.0, 2.0, &mut rng), true);
        let mut builder = |s: &ParamStore, t: &mut Tape| {
            let zid = t.param(s, z);
            Ok(t.cross_entropy(zid, 2))
        };
        let report = finite_difference_check(&mut builder, &mut store, 1e-5).unwrap();
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(2.0), true);
        let frozen = store.insert("frozen", Tensor::scalar(5.0), false);
        let mut builder = |s: &ParamStore, t: &mut Tape| {
            let wid = t.param(s, w);
            let fid = t.param(s, frozen);
            let prod = t.mul(wid, fid);
            Ok(t.sum_all(prod))
        };
        let report = finite_difference_check(&mut builder, &mut store, 1e-4).unwrap();
        assert_eq!(report.checked_params, 1);
        assert_eq!(report.worst_param, "w");
    }

    #[test]
    fn nondeterministic_builder_is_rejected() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(1.0), true);
        let mut calls = 0u64;
        let mut builder = |s: &ParamStore, t: &mut Tape| {
            calls += 1;
            let wid = t.param(s, w);
            let noise = t.scalar(calls as f64);
            let prod = t.mul(wid, noise);
            Ok(t.sum_all(prod))
        };
        assert!(matches!(
            finite_difference_check(&mut builder, &mut store, 1e-4),
            Err(CdlError::Determinism(_))
        ));
    }

    #[test]
    fn step_outside_range_is_contract_violation() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(1.0), true);
        let mut builder = |s: &ParamStore, t: &mut Tape| {
            let wid = t.param(s, w);
            Ok(t.sum_all(wid))
        };
        assert!(finite_difference_check(&mut builder, &mut store, 1e-2).is_err());
    }
}
