//! Distillation objectives.
//!
//! Logit objectives: temperature-softened KL against frozen teacher logits,
//! and its decoupled split into a binary target/non-target term plus a
//! renormalized non-target term. Feature objectives: a last-block hint
//! regression through an affine mapping, and a recursive fusion of student
//! block features against corresponding teacher blocks. The distillation-
//! token objective routes the teacher's soft labels through a dedicated
//! classifier instead, optionally combined with globally shared prompt
//! prefixes dedicated to distillation.

use crate::error::{CdlError, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, TensorId};
use crate::tensor::{softmax_with_temperature, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMethod {
    None,
    Kd,
    Dkd,
    FitNets,
    ReviewKd,
    Deit,
    Kdp,
}

impl DistillMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistillMethod::None => "none",
            DistillMethod::Kd => "kd",
            DistillMethod::Dkd => "dkd",
            DistillMethod::FitNets => "fitnets",
            DistillMethod::ReviewKd => "reviewkd",
            DistillMethod::Deit => "deit",
            DistillMethod::Kdp => "kdp",
        }
    }

    pub fn parse(s: &str) -> Result<DistillMethod> {
        Ok(match s {
            "none" => DistillMethod::None,
            "kd" => DistillMethod::Kd,
            "dkd" => DistillMethod::Dkd,
            "fitnets" => DistillMethod::FitNets,
            "reviewkd" => DistillMethod::ReviewKd,
            "deit" => DistillMethod::Deit,
            "kdp" => DistillMethod::Kdp,
            other => return Err(CdlError::Config(format!("unknown distillation method {other}"))),
        })
    }

    /// Whether the method feeds teacher soft labels through the dedicated
    /// distillation token and classifier.
    pub fn uses_kd_head(&self) -> bool {
        matches!(self, DistillMethod::Deit | DistillMethod::Kdp)
    }

    pub fn uses_teacher(&self) -> bool {
        !matches!(self, DistillMethod::None)
    }

    pub fn needs_teacher_features(&self) -> bool {
        matches!(self, DistillMethod::FitNets | DistillMethod::ReviewKd)
    }
}

/// Which classes the teacher/student logits are restricted to during
/// distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassScope {
    /// Only the classes of the task being trained (both models are
    /// rehearsal-free, so this is what the teacher just saw).
    CurrentTask,
    /// Every class seen so far.
    AllSeen,
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub method: DistillMethod,
    /// Balance between classification and distillation, in [0, 1].
    pub alpha: f64,
    /// Pool-loss weight, >= 0.
    pub lambda: f64,
    /// Softening temperature, > 0.
    pub tau: f64,
    /// Length of each distillation prompt (split in half for prefix-tuning).
    pub kd_prompt_len: usize,
    /// Distillation prompts cover blocks 1..=depth. `None` resolves to every
    /// block for the prompt-based method and to zero for the others.
    pub kd_prompt_depth: Option<usize>,
    pub class_scope: ClassScope,
}

impl DistillConfig {
    pub fn new(method: DistillMethod) -> DistillConfig {
        DistillConfig {
            method,
            alpha: 0.5,
            lambda: 1.0,
            tau: 2.0,
            kd_prompt_len: 6,
            kd_prompt_depth: None,
            class_scope: ClassScope::CurrentTask,
        }
    }

    /// Number of blocks that carry distillation prompts for a model with
    /// `blocks` blocks.
    pub fn prompt_depth(&self, blocks: usize) -> usize {
        match self.kd_prompt_depth {
            Some(d) => d.min(blocks),
            None => match self.method {
                DistillMethod::Kdp => blocks,
                _ => 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CdlError::Config(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.lambda < 0.0 {
            return Err(CdlError::Config(format!("lambda {} negative", self.lambda)));
        }
        if self.tau <= 0.0 {
            return Err(CdlError::Config(format!("tau {} not positive", self.tau)));
        }
        if self.kd_prompt_len == 0 || self.kd_prompt_len % 2 != 0 {
            return Err(CdlError::Config(format!(
                "distillation prompt length {} must be positive and even",
                self.kd_prompt_len
            )));
        }
        Ok(())
    }
}

/// tau^2-scaled KL divergence between softened teacher and student
/// distributions. The teacher side is a constant; gradients only reach the
/// student logits.
pub fn kd_loss(
    tape: &mut Tape,
    student_logits: TensorId,
    teacher_logits: &Tensor,
    tau: f64,
) -> Result<TensorId> {
    let s_len = tape
        .value(student_logits)
        .as_vector()
        .ok_or_else(|| CdlError::Contract("student logits must be a vector".into()))?
        .len();
    if s_len != teacher_logits.numel() {
        return Err(CdlError::Contract(format!(
            "class dimensions differ after scoping: student {s_len}, teacher {}",
            teacher_logits.numel()
        )));
    }
    let p_teacher = softmax_with_temperature(teacher_logits.data(), tau)?;
    let pt = tape.constant(&Tensor::from_vec(vec![s_len], p_teacher));
    let ps = tape.softmax_temp(student_logits, tau)?;
    let kl = tape.kl_div(pt, ps);
    Ok(tape.scale(kl, tau * tau))
}

/// Decoupled logit distillation: a binary KL over (target, non-target) mass
/// plus the teacher's non-target mass times the KL between renormalized
/// non-target distributions. Returned un-tau^2-scaled; the two terms sum to
/// the full softened KL.
pub fn dkd_loss(
    tape: &mut Tape,
    student_logits: TensorId,
    teacher_logits: &Tensor,
    target: usize,
    tau: f64,
) -> Result<(TensorId, TensorId)> {
    let classes = teacher_logits.numel();
    if classes < 2 {
        return Err(CdlError::Contract(
            "decoupled distillation needs at least two classes".into(),
        ));
    }
    let s_len = tape
        .value(student_logits)
        .as_vector()
        .map(<[f64]>::len)
        .ok_or_else(|| CdlError::Contract("student logits must be a vector".into()))?;
    if s_len != classes {
        return Err(CdlError::Contract(format!(
            "class dimensions differ: student {s_len}, teacher {classes}"
        )));
    }
    if target >= classes {
        return Err(CdlError::Contract(format!(
            "target {target} out of range for {classes} classes"
        )));
    }

    let p_teacher = softmax_with_temperature(teacher_logits.data(), tau)?;
    let pt_t = p_teacher[target];
    let pt_not = 1.0 - pt_t;

    // Binary target/non-target KL.
    let ps = tape.softmax_temp(student_logits, tau)?;
    let ps_t = tape.gather(ps, &[target]);
    let ps_not = tape.affine(ps_t, -1.0, 1.0);
    let binary_s = tape.concat_1d(&[ps_t, ps_not]);
    let binary_t = tape.constant(&Tensor::from_vec(vec![2], vec![pt_t, pt_not]));
    let tckd = tape.kl_div(binary_t, binary_s);

    // Renormalized non-target distributions.
    let nt: Vec<usize> = (0..classes).filter(|&i| i != target).collect();
    let hat_teacher = softmax_with_temperature(
        &nt.iter().map(|&i| teacher_logits.data()[i]).collect::<Vec<_>>(),
        tau,
    )?;
    let s_nt = tape.gather(student_logits, &nt);
    let hat_s = tape.softmax_temp(s_nt, tau)?;
    let hat_t = tape.constant(&Tensor::from_vec(vec![nt.len()], hat_teacher));
    let inner = tape.kl_div(hat_t, hat_s);
    let nckd = tape.scale(inner, pt_not);
    Ok((tckd, nckd))
}

/// Affine feature mapping from the student's embedding width to the
/// teacher's.
#[derive(Debug, Clone)]
pub struct FeatureMapping {
    pub w: ParamId,
    pub b: ParamId,
}

impl FeatureMapping {
    pub fn init(
        name: &str,
        student_dim: usize,
        teacher_dim: usize,
        store: &mut ParamStore,
        rng: &mut SeededRng,
    ) -> FeatureMapping {
        let mut r = rng.split(name);
        FeatureMapping {
            w: store.insert(format!("{name}/w"), Tensor::randn(&[student_dim, teacher_dim], 0.02, &mut r), true),
            b: store.insert(format!("{name}/b"), Tensor::zeros(&[teacher_dim]), true),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: TensorId, train: bool) -> TensorId {
        let w = if train { tape.param(store, self.w) } else { tape.param_detached(store, self.w) };
        let b = if train { tape.param(store, self.b) } else { tape.param_detached(store, self.b) };
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

/// Mean squared error between the teacher's hint features and the mapped
/// student features.
pub fn fitnets_loss(
    tape: &mut Tape,
    store: &ParamStore,
    student_feature: TensorId,
    teacher_feature: &Tensor,
    mapping: &FeatureMapping,
    train: bool,
) -> Result<TensorId> {
    if tape.value(student_feature).nrows() != teacher_feature.nrows() {
        return Err(CdlError::Config(format!(
            "patch grids differ: student has {} tokens, teacher {}",
            tape.value(student_feature).nrows(),
            teacher_feature.nrows()
        )));
    }
    let mapped = mapping.apply(tape, store, student_feature, train);
    if tape.value(mapped).ncols() != teacher_feature.ncols() {
        return Err(CdlError::Config(format!(
            "mapping output width {} does not match teacher width {}",
            tape.value(mapped).ncols(),
            teacher_feature.ncols()
        )));
    }
    let t = tape.constant(teacher_feature);
    Ok(tape.mse(t, mapped))
}

/// 0-indexed teacher block matched to each 0-indexed student block:
/// round((j+1) * teacher_blocks / student_blocks) - 1.
pub fn block_correspondence(student_blocks: usize, teacher_blocks: usize) -> Vec<usize> {
    (0..student_blocks)
        .map(|j| {
            let m = ((j + 1) as f64 * teacher_blocks as f64 / student_blocks as f64).round() as usize;
            m.clamp(1, teacher_blocks) - 1
        })
        .collect()
}

/// Recursive feature review: starting from the deepest student block,
/// features are fused downward through learnable convex gates and each fused
/// feature is regressed (through its block's mapping) onto the matching
/// teacher feature. Distances are per-element mean squared.
pub fn reviewkd_loss(
    tape: &mut Tape,
    store: &ParamStore,
    student_features: &[TensorId],
    teacher_features: &[&Tensor],
    mappings: &[FeatureMapping],
    gates: &[ParamId],
    train: bool,
) -> Result<TensorId> {
    let n = student_features.len();
    if n == 0 {
        return Err(CdlError::Contract("feature review needs at least one block".into()));
    }
    if teacher_features.len() != n || mappings.len() != n || gates.len() + 1 != n {
        return Err(CdlError::Contract(format!(
            "inconsistent review inputs: {n} student blocks, {} teacher, {} mappings, {} gates",
            teacher_features.len(),
            mappings.len(),
            gates.len()
        )));
    }

    let distance = |tape: &mut Tape, store: &ParamStore, fused: TensorId, j: usize| -> Result<TensorId> {
        if tape.value(fused).nrows() != teacher_features[j].nrows() {
            return Err(CdlError::Config(format!(
                "patch grids differ at block {j}: student {} tokens, teacher {}",
                tape.value(fused).nrows(),
                teacher_features[j].nrows()
            )));
        }
        let mapped = mappings[j].apply(tape, store, fused, train);
        let t = tape.constant(teacher_features[j]);
        Ok(tape.mse(mapped, t))
    };

    // Deepest block compares directly.
    let mut fused = student_features[n - 1];
    let mut total = distance(tape, store, fused, n - 1)?;
    // Walk down, fusing each block with the running fusion from above.
    for j in (0..n - 1).rev() {
        let w = if train { tape.param(store, gates[j]) } else { tape.param_detached(store, gates[j]) };
        let gate = tape.sigmoid(w);
        let keep = tape.mul_scalar(student_features[j], gate);
        let inv = tape.affine(gate, -1.0, 1.0);
        let carry = tape.mul_scalar(fused, inv);
        fused = tape.add(keep, carry);
        let d = distance(tape, store, fused, j)?;
        total = tape.add(total, d);
    }
    Ok(total)
}

/// Test-time head combination: the average of the two softmax distributions;
/// the prediction is its argmax (lowest index wins ties).
pub fn combine_heads_predict(class_logits: &[f64], kd_logits: &[f64]) -> Result<(Vec<f64>, usize)> {
    if class_logits.len() != kd_logits.len() || class_logits.is_empty() {
        return Err(CdlError::Contract(format!(
            "head dimensions differ: {} vs {}",
            class_logits.len(),
            kd_logits.len()
        )));
    }
    let pc = softmax_with_temperature(class_logits, 1.0)?;
    let pk = softmax_with_temperature(kd_logits, 1.0)?;
    let combined: Vec<f64> = pc.iter().zip(&pk).map(|(a, b)| 0.5 * (a + b)).collect();
    let mut best = 0;
    for i in 1..combined.len() {
        if combined[i] > combined[best] {
            best = i;
        }
    }
    Ok((combined, best))
}
