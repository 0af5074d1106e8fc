//! The continual-distillation loop: backbone pretraining, per-task training
//! of a prompt-based learner, the per-task teacher-then-student protocol,
//! and the freeze/rehearsal audits that police it.

use std::collections::HashMap;
use std::time::Instant;

use crate::adam::AdamOpt;
use crate::data::{AuditedReader, Dataset, TaskStream};
use crate::distill::{DistillConfig, DistillMethod};
use crate::error::{CdlError, Result};
use crate::metrics::{MetricsReport, ResultMatrix};
use crate::model::{ContinualModel, FreezeMode, StudentLossCtx, TeacherSnapshot};
use crate::params::ParamId;
use crate::pools::{PoolMethod, PoolSpec};
use crate::rng::SeededRng;
use crate::tape::{GradMap, Tape};
use crate::tensor::Tensor;
use crate::vit::{Backbone, ClassifierHead, HeadRole, Mode, ViTConfig};

/// Which pool sizing to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolPreset {
    /// Sizes small enough for CPU acceptance runs.
    Desk,
    /// The published full-scale pool sizes.
    Paper,
}

pub fn pool_spec(method: PoolMethod, preset: PoolPreset, blocks: usize, tasks: usize) -> PoolSpec {
    match (method, preset) {
        (PoolMethod::L2P, PoolPreset::Desk) => PoolSpec::desk_l2p(),
        (PoolMethod::DualPrompt, PoolPreset::Desk) => PoolSpec::desk_dual(blocks, tasks),
        (PoolMethod::Coda, PoolPreset::Desk) => PoolSpec::desk_coda(blocks, tasks),
        (PoolMethod::L2P, PoolPreset::Paper) => PoolSpec::paper_l2p(),
        (PoolMethod::DualPrompt, PoolPreset::Paper) => PoolSpec::paper_dual(tasks),
        (PoolMethod::Coda, PoolPreset::Paper) => PoolSpec::paper_coda(tasks),
    }
}

/// Everything one continual-distillation run needs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub tasks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pool_method: PoolMethod,
    pub pool_preset: PoolPreset,
    pub distill: DistillConfig,
    pub unfreeze_last_block: bool,
    pub student: ViTConfig,
    pub teacher: Option<ViTConfig>,
    pub eval_teacher: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CdlError::Config("epochs and batch size must be at least 1".into()));
        }
        self.distill.validate()?;
        if self.distill.method.uses_teacher() && self.teacher.is_none() {
            return Err(CdlError::Config(format!(
                "distillation method {} needs a teacher model",
                self.distill.method.as_str()
            )));
        }
        Ok(())
    }
}

/// Outcome of pretraining a backbone on the reserved class block.
pub struct PretrainOutcome {
    /// Backbone arrays (name, value) ready for a CDLW file.
    pub backbone: Vec<(String, Tensor)>,
    /// Accuracy on the pretraining classes' held-out samples, percent.
    pub holdout_acc: f64,
}

/// Trains a fresh backbone with plain cross-entropy on the pretraining
/// classes. Zero epochs yields a randomly initialized backbone.
pub fn pretrain_backbone(
    vit: &ViTConfig,
    data: &Dataset,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<PretrainOutcome> {
    let pretrain_classes = data.spec.pretrain_classes;
    if pretrain_classes == 0 {
        return Err(CdlError::Config("dataset reserves no pretraining classes".into()));
    }
    if batch_size == 0 {
        return Err(CdlError::Config("batch size must be at least 1".into()));
    }
    let mut cfg = vit.clone();
    cfg.class_capacity = pretrain_classes;
    let mut store = crate::params::ParamStore::new();
    let mut rng = SeededRng::new(seed).split("pretrain");
    let backbone = Backbone::init(cfg.clone(), &mut store, &mut rng)?;
    let head = ClassifierHead::init("pretrain/head", cfg.embed_dim, pretrain_classes, HeadRole::Student, &mut store, &mut rng);

    let mut train_idx: Vec<usize> = (0..pretrain_classes).flat_map(|c| data.train_indices(c)).collect();
    let mut opt = AdamOpt::new(learning_rate);
    let order_rng = SeededRng::new(seed).split("pretrain-order");
    for epoch in 0..epochs {
        let mut r = order_rng.split(&format!("epoch{epoch}"));
        r.shuffle(&mut train_idx);
        for batch in train_idx.chunks(batch_size) {
            let mut acc = GradAccumulator::new();
            for &idx in batch {
                let image = data.image(idx);
                let label = data.label(idx);
                let mut tape = Tape::new();
                let prefixes = vec![crate::vit::BlockPrefix::default(); cfg.blocks];
                let fwd = backbone.forward(&mut tape, &store, &image, &prefixes, false, Mode::Train)?;
                let raw = head.classify(&mut tape, &store, fwd.cls_embed, None, Mode::Train)?;
                let flat = tape.reshape(raw, &[pretrain_classes]);
                let loss = tape.cross_entropy(flat, label);
                let grads = tape.backward(loss)?;
                acc.add(&grads);
            }
            opt.step(&mut store, &acc.mean(batch.len())?)?;
        }
    }

    // Held-out accuracy over the pretraining classes' test samples.
    let mut correct = 0usize;
    let mut total = 0usize;
    for c in 0..pretrain_classes {
        for idx in data.test_indices(c) {
            let image = data.image(idx);
            let mut tape = Tape::new();
            let prefixes = vec![crate::vit::BlockPrefix::default(); cfg.blocks];
            let fwd = backbone.forward(&mut tape, &store, &image, &prefixes, false, Mode::Eval)?;
            let raw = head.classify(&mut tape, &store, fwd.cls_embed, None, Mode::Eval)?;
            let v = tape.value(raw);
            let mut best = 0;
            for i in 1..pretrain_classes {
                if v.data()[i] > v.data()[best] {
                    best = i;
                }
            }
            correct += usize::from(best == data.label(idx));
            total += 1;
        }
    }
    let snapshot = backbone.snapshot(&store);
    Ok(PretrainOutcome {
        backbone: snapshot,
        holdout_acc: 100.0 * correct as f64 / total.max(1) as f64,
    })
}

/// Accumulates per-sample gradients into a batch mean.
struct GradAccumulator {
    sums: HashMap<ParamId, (Vec<usize>, Vec<f64>)>,
}

impl GradAccumulator {
    fn new() -> GradAccumulator {
        GradAccumulator { sums: HashMap::new() }
    }

    fn add(&mut self, grads: &GradMap) {
        for (id, g) in grads.iter() {
            let entry = self
                .sums
                .entry(id)
                .or_insert_with(|| (g.shape().to_vec(), vec![0.0; g.numel()]));
            for (o, v) in entry.1.iter_mut().zip(g.data()) {
                *o += v;
            }
        }
    }

    fn mean(self, batch: usize) -> Result<GradMap> {
        if batch == 0 {
            return Err(CdlError::Contract("empty batch".into()));
        }
        let inv = 1.0 / batch as f64;
        let mut map = GradMap::default();
        for (id, (shape, mut data)) in self.sums {
            for v in data.iter_mut() {
                *v *= inv;
            }
            map.insert(id, Tensor::from_vec(shape, data));
        }
        Ok(map)
    }
}

/// Per-task training statistics.
#[derive(Debug, Clone, Default)]
pub struct TaskStats {
    /// Mean combined loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub train_reads: u64,
}

/// Trains one model on one task's data. The teacher snapshot must be present
/// exactly when the configured method distills.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    model: &mut ContinualModel,
    data: &Dataset,
    stream: &TaskStream,
    task: usize,
    cfg: &RunConfig,
    dcfg: &DistillConfig,
    teacher: Option<&TeacherSnapshot>,
    order_root: &SeededRng,
) -> Result<TaskStats> {
    dcfg.validate()?;
    if dcfg.method.uses_teacher() != teacher.is_some() {
        return Err(CdlError::Contract(format!(
            "method {} {} a teacher snapshot",
            dcfg.method.as_str(),
            if dcfg.method.uses_teacher() { "requires" } else { "does not take" }
        )));
    }
    let task_def = &stream.tasks[task];
    let capacity = model.backbone.cfg.class_capacity;

    model.pool.set_task(&mut model.store, task);

    let mut active = vec![false; capacity];
    for &c in &task_def.classes {
        active[stream.cl_label(data, c)] = true;
    }
    let scope: Vec<usize> = match dcfg.class_scope {
        crate::distill::ClassScope::CurrentTask => {
            let mut s: Vec<usize> = task_def.classes.iter().map(|&c| stream.cl_label(data, c)).collect();
            s.sort_unstable();
            s
        }
        crate::distill::ClassScope::AllSeen => stream.seen_labels(data, task),
    };

    let mut reader = AuditedReader::new(data, &task_def.train);
    let mut opt = AdamOpt::new(cfg.learning_rate);
    let mut order: Vec<usize> = task_def.train.clone();
    let mut stats = TaskStats::default();
    let unfrozen = model.freeze_mode == FreezeMode::ExceptLastBlock;

    for epoch in 0..cfg.epochs {
        let mut r = order_root.split(&format!("task{task}/epoch{epoch}"));
        r.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradAccumulator::new();
            for &idx in batch {
                let image = reader.image(idx)?;
                let label = stream.cl_label(data, reader.label(idx));
                let t_out = match teacher {
                    Some(snap) => Some(snap.outputs(idx as u64, &image)?),
                    None => None,
                };
                let mut tape = Tape::new();
                let parts = model.student_loss(
                    &mut tape,
                    idx as u64,
                    &image,
                    label,
                    &StudentLossCtx {
                        task,
                        active: &active,
                        scope: &scope,
                        teacher: t_out.as_deref(),
                        cfg: dcfg,
                    },
                )?;
                epoch_loss += parts.total_value;
                let grads = tape.backward(parts.total)?;
                acc.add(&grads);
            }
            opt.step(&mut model.store, &acc.mean(batch.len())?)?;
            if unfrozen {
                model.invalidate_query_cache();
            }
        }
        stats.epoch_losses.push(epoch_loss / order.len().max(1) as f64);
    }
    stats.train_reads = reader.reads;
    Ok(stats)
}

/// Accuracy (percent) of a model over the given test samples, predicting
/// among the classes seen so far.
pub fn evaluate(
    model: &ContinualModel,
    data: &Dataset,
    stream: &TaskStream,
    indices: &[usize],
    seen: &[usize],
) -> Result<f64> {
    let mut correct = 0usize;
    for &idx in indices {
        let image = data.image(idx);
        let label = stream.cl_label(data, data.label(idx));
        let pred = model.predict(idx as u64, &image, seen)?;
        correct += usize::from(pred == label);
    }
    Ok(100.0 * correct as f64 / indices.len().max(1) as f64)
}

/// Freeze-discipline and rehearsal bookkeeping for one run.
#[derive(Debug, Clone, Default)]
pub struct RunAudit {
    /// Student backbone checksum after every phase; constant when frozen.
    pub student_backbone_checksums: Vec<u64>,
    pub teacher_backbone_checksums: Vec<u64>,
    /// Teacher snapshot checksum verified unchanged after each student phase.
    pub teacher_snapshot_stable: bool,
    /// Full teacher store unchanged across each student phase.
    pub teacher_stable_during_student: bool,
    pub per_task_train_reads: Vec<u64>,
    /// Reads outside the active task (violations abort, so this stays 0).
    pub out_of_task_reads: u64,
    /// Backbone arrays that changed across the whole run (unfreeze mode).
    pub student_backbone_diff: Vec<String>,
}

impl RunAudit {
    pub fn student_backbone_constant(&self) -> bool {
        self.student_backbone_checksums.windows(2).all(|w| w[0] == w[1])
    }

    pub fn teacher_backbone_constant(&self) -> bool {
        self.teacher_backbone_checksums.windows(2).all(|w| w[0] == w[1])
    }
}

/// Everything a continual-distillation run produces.
pub struct CdlOutcome {
    pub student_matrix: ResultMatrix,
    pub teacher_matrix: Option<ResultMatrix>,
    pub student_report: MetricsReport,
    pub teacher_report: Option<MetricsReport>,
    pub audit: RunAudit,
    pub student_stats: Vec<TaskStats>,
    pub teacher_stats: Vec<TaskStats>,
}

/// One student's results inside a multi-student run.
pub struct StudentRun {
    pub label: String,
    pub matrix: ResultMatrix,
    pub report: MetricsReport,
    pub stats: Vec<TaskStats>,
    pub backbone_checksums: Vec<u64>,
}

/// Results of a shared-teacher run.
pub struct MultiOutcome {
    pub teacher_matrix: Option<ResultMatrix>,
    pub teacher_report: Option<MetricsReport>,
    pub students: Vec<StudentRun>,
}

/// Trains one teacher trajectory and several students against it, one
/// student per distillation variant. Teacher training and every student's
/// random streams are identical to what a solo [`cdl_run`] with the same
/// seed would use, so each student's results are bit-identical to its solo
/// run; the teacher is simply not retrained per variant.
pub fn cdl_run_multi(
    cfg: &RunConfig,
    variants: &[(String, DistillConfig)],
    data: &Dataset,
    stream: &TaskStream,
    pretrained_student: &crate::params::ParamStore,
    pretrained_teacher: Option<&crate::params::ParamStore>,
) -> Result<MultiOutcome> {
    if variants.is_empty() {
        return Err(CdlError::Config("no student variants given".into()));
    }
    let start = Instant::now();
    let root = SeededRng::new(cfg.seed);
    let classes = stream.cl_classes;
    let mut student_vit = cfg.student.clone();
    student_vit.class_capacity = classes;

    let any_teacher = variants.iter().any(|(_, d)| d.method.uses_teacher());
    let mut teacher: Option<ContinualModel> = match (&cfg.teacher, pretrained_teacher) {
        (Some(tvit), Some(pre)) => {
            let mut tv = tvit.clone();
            tv.class_capacity = classes;
            let mut trng = root.split("teacher-model");
            Some(ContinualModel::assemble(
                "teacher",
                tv.clone(),
                pool_spec(cfg.pool_method, cfg.pool_preset, tv.blocks, cfg.tasks),
                pre,
                HeadRole::Teacher,
                None,
                FreezeMode::All,
                &mut trng,
            )?)
        }
        (Some(_), None) => {
            return Err(CdlError::Config(
                "teacher model configured but no pretrained teacher backbone given".into(),
            ))
        }
        (None, _) => None,
    };
    if any_teacher && teacher.is_none() {
        return Err(CdlError::Config("distillation variants need a teacher".into()));
    }

    // Assemble each student exactly as its solo run would.
    let mut students: Vec<(ContinualModel, DistillConfig)> = Vec::new();
    for (_, dcfg) in variants {
        dcfg.validate()?;
        let mut srng = root.split("student-model");
        let pair = if dcfg.method.uses_teacher() {
            let mut tv = cfg.teacher.clone().expect("checked above");
            tv.class_capacity = classes;
            Some((dcfg.clone(), tv))
        } else {
            None
        };
        students.push((
            ContinualModel::assemble(
                "student",
                student_vit.clone(),
                pool_spec(cfg.pool_method, cfg.pool_preset, student_vit.blocks, cfg.tasks),
                pretrained_student,
                HeadRole::Student,
                pair.as_ref().map(|(d, t)| (d, t)),
                if cfg.unfreeze_last_block { FreezeMode::ExceptLastBlock } else { FreezeMode::All },
                &mut srng,
            )?,
            dcfg.clone(),
        ));
    }

    // Union of teacher feature blocks needed by any variant.
    let mut feature_blocks: Vec<usize> = Vec::new();
    if let Some(tvit) = &cfg.teacher {
        for (_, d) in variants {
            if d.method.needs_teacher_features() {
                match d.method {
                    DistillMethod::FitNets => feature_blocks.push(tvit.blocks - 1),
                    _ => feature_blocks
                        .extend(crate::distill::block_correspondence(student_vit.blocks, tvit.blocks)),
                }
            }
        }
        feature_blocks.sort_unstable();
        feature_blocks.dedup();
    }

    let none_cfg = DistillConfig::new(DistillMethod::None);
    let order_root = root.split("batch-order");
    let mut teacher_matrix = teacher.as_ref().map(|_| ResultMatrix::new(cfg.tasks));
    let mut per_student: Vec<StudentRun> = variants
        .iter()
        .map(|(label, _)| StudentRun {
            label: label.clone(),
            matrix: ResultMatrix::new(cfg.tasks),
            report: MetricsReport {
                avg_acc: 0.0,
                forgetting: 0.0,
                forgetting_defined: false,
                per_task_final: Vec::new(),
                wall_clock_secs: 0.0,
                seed: cfg.seed,
            },
            stats: Vec::new(),
            backbone_checksums: Vec::new(),
        })
        .collect();

    for t in 0..cfg.tasks {
        let snapshot = if let Some(tm) = teacher.as_mut() {
            let st = train_task(tm, data, stream, t, cfg, &none_cfg, None, &order_root)?;
            let _ = st;
            if any_teacher {
                Some(TeacherSnapshot::of(tm, t, feature_blocks.clone()))
            } else {
                None
            }
        } else {
            None
        };
        let seen = stream.seen_labels(data, t);
        for ((model, dcfg), run) in students.iter_mut().zip(per_student.iter_mut()) {
            let snap = dcfg.method.uses_teacher().then(|| snapshot.as_ref().unwrap());
            let st = train_task(model, data, stream, t, cfg, dcfg, snap, &order_root)?;
            run.stats.push(st);
            run.backbone_checksums.push(model.backbone.checksum(&model.store));
            for j in 0..=t {
                let acc = evaluate(model, data, stream, &stream.tasks[j].test, &seen)?;
                run.matrix.set(t, j, acc);
            }
        }
        if cfg.eval_teacher {
            if let (Some(tm), Some(mat)) = (&teacher, teacher_matrix.as_mut()) {
                for j in 0..=t {
                    mat.set(t, j, evaluate(tm, data, stream, &stream.tasks[j].test, &seen)?);
                }
            }
        }
    }

    if !cfg.eval_teacher {
        teacher_matrix = None;
    }
    let wall = start.elapsed().as_secs_f64();
    for run in per_student.iter_mut() {
        run.report = MetricsReport::from_matrix(&run.matrix, cfg.seed, wall)?;
    }
    let teacher_report = match &teacher_matrix {
        Some(m) => Some(MetricsReport::from_matrix(m, cfg.seed, wall)?),
        None => None,
    };
    Ok(MultiOutcome { teacher_matrix, teacher_report, students: per_student })
}

/// The per-task protocol: train the teacher on the task, freeze and snapshot
/// it, train the student against it, then evaluate both on every task seen.
pub fn cdl_run(
    cfg: &RunConfig,
    data: &Dataset,
    stream: &TaskStream,
    pretrained_student: &crate::params::ParamStore,
    pretrained_teacher: Option<&crate::params::ParamStore>,
) -> Result<CdlOutcome> {
    cfg.validate()?;
    if stream.tasks.len() != cfg.tasks {
        return Err(CdlError::Config(format!(
            "stream has {} tasks, config expects {}",
            stream.tasks.len(),
            cfg.tasks
        )));
    }
    let start = Instant::now();
    let root = SeededRng::new(cfg.seed);
    let classes = stream.cl_classes;

    let mut student_vit = cfg.student.clone();
    student_vit.class_capacity = classes;
    let distill_pair = if cfg.distill.method.uses_teacher() {
        let t = cfg.teacher.clone().expect("validated");
        Some((cfg.distill.clone(), t))
    } else {
        None
    };
    let mut srng = root.split("student-model");
    let mut student = ContinualModel::assemble(
        "student",
        student_vit.clone(),
        pool_spec(cfg.pool_method, cfg.pool_preset, student_vit.blocks, cfg.tasks),
        pretrained_student,
        HeadRole::Student,
        distill_pair.as_ref().map(|(d, t)| {
            let mut tv = t.clone();
            tv.class_capacity = classes;
            (d, tv)
        }).as_ref().map(|(d, t)| (*d, t)),
        if cfg.unfreeze_last_block { FreezeMode::ExceptLastBlock } else { FreezeMode::All },
        &mut srng,
    )?;

    let mut teacher: Option<ContinualModel> = match (&cfg.teacher, pretrained_teacher) {
        (Some(tvit), Some(pre)) => {
            let mut tv = tvit.clone();
            tv.class_capacity = classes;
            let mut trng = root.split("teacher-model");
            Some(ContinualModel::assemble(
                "teacher",
                tv.clone(),
                pool_spec(cfg.pool_method, cfg.pool_preset, tv.blocks, cfg.tasks),
                pre,
                HeadRole::Teacher,
                None,
                FreezeMode::All,
                &mut trng,
            )?)
        }
        (Some(_), None) => {
            return Err(CdlError::Config(
                "teacher model configured but no pretrained teacher backbone given".into(),
            ))
        }
        (None, _) => None,
    };
    if cfg.distill.method.uses_teacher() && teacher.is_none() {
        return Err(CdlError::Config("distillation without a teacher".into()));
    }

    // Teacher blocks whose features the student compares.
    let feature_blocks: Vec<usize> = if cfg.distill.method.needs_teacher_features() {
        let n_t = cfg.teacher.as_ref().unwrap().blocks;
        match cfg.distill.method {
            DistillMethod::FitNets => vec![n_t - 1],
            _ => {
                let mut v = crate::distill::block_correspondence(student_vit.blocks, n_t);
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    } else {
        Vec::new()
    };

    let none_cfg = DistillConfig::new(DistillMethod::None);
    let order_root = root.split("batch-order");
    let mut audit = RunAudit::default();
    let student_backbone_before = student.backbone.snapshot(&student.store);
    audit.student_backbone_checksums.push(student.backbone.checksum(&student.store));
    if let Some(t) = &teacher {
        audit.teacher_backbone_checksums.push(t.backbone.checksum(&t.store));
    }
    audit.teacher_snapshot_stable = true;
    audit.teacher_stable_during_student = true;

    let mut student_matrix = ResultMatrix::new(cfg.tasks);
    let mut teacher_matrix = teacher.as_ref().map(|_| ResultMatrix::new(cfg.tasks));
    let mut student_stats = Vec::new();
    let mut teacher_stats = Vec::new();

    for t in 0..cfg.tasks {
        // Teacher learns the task first.
        let snapshot = if let Some(tm) = teacher.as_mut() {
            let st = train_task(tm, data, stream, t, cfg, &none_cfg, None, &order_root)?;
            audit.teacher_backbone_checksums.push(tm.backbone.checksum(&tm.store));
            let reads = st.train_reads;
            teacher_stats.push(st);
            audit.per_task_train_reads.push(reads);
            if cfg.distill.method.uses_teacher() {
                Some(TeacherSnapshot::of(tm, t, feature_blocks.clone()))
            } else {
                None
            }
        } else {
            None
        };

        // Student learns the task against the frozen snapshot.
        let teacher_full_before: Option<u64> = teacher
            .as_ref()
            .map(|tm| tm.store.checksum_of(&tm.store.ids().collect::<Vec<_>>()));
        let st = train_task(
            &mut student,
            data,
            stream,
            t,
            cfg,
            &cfg.distill,
            snapshot.as_ref(),
            &order_root,
        )?;
        audit.student_backbone_checksums.push(student.backbone.checksum(&student.store));
        let reads = st.train_reads;
        student_stats.push(st);
        audit.per_task_train_reads.push(reads);
        if let Some(snap) = &snapshot {
            audit.teacher_snapshot_stable &= snap.verify_unchanged();
        }
        if let (Some(tm), Some(before)) = (&teacher, teacher_full_before) {
            let after = tm.store.checksum_of(&tm.store.ids().collect::<Vec<_>>());
            audit.teacher_stable_during_student &= before == after;
        }

        // Row t of both result matrices.
        let seen = stream.seen_labels(data, t);
        for j in 0..=t {
            let acc = evaluate(&student, data, stream, &stream.tasks[j].test, &seen)?;
            student_matrix.set(t, j, acc);
            if cfg.eval_teacher {
                if let (Some(tm), Some(mat)) = (&teacher, teacher_matrix.as_mut()) {
                    mat.set(t, j, evaluate(tm, data, stream, &stream.tasks[j].test, &seen)?);
                }
            }
        }
    }

    if cfg.unfreeze_last_block {
        let after = student.backbone.snapshot(&student.store);
        audit.student_backbone_diff =
            crate::vit::snapshot_diff_checked(&student_backbone_before, &after)?;
    }
    if !cfg.eval_teacher {
        teacher_matrix = None;
    }

    let wall = start.elapsed().as_secs_f64();
    let student_report = MetricsReport::from_matrix(&student_matrix, cfg.seed, wall)?;
    let teacher_report = match &teacher_matrix {
        Some(m) => Some(MetricsReport::from_matrix(m, cfg.seed, wall)?),
        None => None,
    };
    Ok(CdlOutcome {
        student_matrix,
        teacher_matrix,
        student_report,
        teacher_report,
        audit,
        student_stats,
        teacher_stats,
    })
}
