//! End-to-end harness behavior on miniature configurations: the combined
//! student loss in its limits, the full-composite gradient check, training
//! dynamics, the teacher-then-student protocol, and its audits.

use cdl_core::data::{Dataset, DatasetSpec};
use cdl_core::distill::{ClassScope, DistillConfig, DistillMethod};
use cdl_core::gradcheck::finite_difference_check;
use cdl_core::harness::{
    cdl_run, evaluate, pool_spec, pretrain_backbone, train_task, PoolPreset, RunConfig,
};
use cdl_core::model::{ContinualModel, FreezeMode, StudentLossCtx, TeacherOutputs, TeacherSnapshot};
use cdl_core::pools::PoolMethod;
use cdl_core::vit::{HeadRole, ViTConfig};
use cdl_core::{ParamStore, SeededRng, Tape, Tensor};

fn tiny_dataset() -> Dataset {
    Dataset::generate(&DatasetSpec {
        classes: 6,
        pretrain_classes: 2,
        image_size: 8,
        channels: 1,
        train_per_class: 12,
        test_per_class: 4,
        noise_sigma: 0.05,
        shift_jitter: 1,
        contrast_jitter: 0.1,
        seed: 11,
    })
    .unwrap()
}

fn tiny_student() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 16,
        key_dim: 16,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2,
        class_capacity: 4,
    }
}

fn tiny_teacher() -> ViTConfig {
    ViTConfig { embed_dim: 24, key_dim: 24, blocks: 3, heads: 2, ..tiny_student() }
}

fn tiny_run(method: DistillMethod, seed: u64, with_teacher: bool) -> RunConfig {
    RunConfig {
        seed,
        tasks: 2,
        epochs: 2,
        batch_size: 8,
        learning_rate: 0.001,
        pool_method: PoolMethod::Coda,
        pool_preset: PoolPreset::Desk,
        distill: DistillConfig::new(method),
        unfreeze_last_block: false,
        student: tiny_student(),
        teacher: with_teacher.then(tiny_teacher),
        eval_teacher: with_teacher,
    }
}

fn pretrained(vit: &ViTConfig, data: &Dataset, epochs: usize, seed: u64) -> ParamStore {
    let out = pretrain_backbone(vit, data, epochs, 0.001, 8, seed).unwrap();
    let mut store = ParamStore::new();
    for (name, t) in out.backbone {
        store.insert(name, t, false);
    }
    store
}

/// Assembles a student (and optionally teacher outputs for one sample) for
/// loss-level tests.
struct Fixture {
    data: Dataset,
    student: ContinualModel,
    teacher_out: TeacherOutputs,
    image: Tensor,
    label: usize,
    scope: Vec<usize>,
    active: Vec<bool>,
}

fn fixture(method: DistillMethod) -> Fixture {
    let data = tiny_dataset();
    let mut rng = SeededRng::new(5);
    let pre = pretrained(&tiny_student(), &data, 0, 21);
    let mut vit = tiny_student();
    vit.class_capacity = 4;
    let teacher_vit = tiny_teacher();
    let cfg = DistillConfig::new(method);
    let student = ContinualModel::assemble(
        "student",
        vit.clone(),
        pool_spec(PoolMethod::Coda, PoolPreset::Desk, vit.blocks, 2),
        &pre,
        HeadRole::Student,
        Some((&cfg, &teacher_vit)),
        FreezeMode::All,
        &mut rng,
    )
    .unwrap();
    // Plausible teacher outputs: random logits, random features for every
    // teacher block.
    let mut trng = SeededRng::new(77);
    let logits: Vec<f64> = (0..4).map(|_| trng.uniform(-1.5, 1.5)).collect();
    let mut features = std::collections::HashMap::new();
    for b in 0..teacher_vit.blocks {
        features.insert(b, Tensor::rand_uniform(&[5, 24], -1.0, 1.0, &mut trng));
    }
    let image = data.image(data.train_indices(2).next().unwrap());
    Fixture {
        student,
        teacher_out: TeacherOutputs { logits, features },
        image,
        label: 0,
        scope: vec![0, 1],
        active: vec![true, true, false, false],
        data,
    }
}

fn loss_of(f: &Fixture, cfg: &DistillConfig) -> cdl_core::model::LossParts {
    let mut tape = Tape::new();
    let ctx = StudentLossCtx {
        task: 0,
        active: &f.active,
        scope: &f.scope,
        teacher: cfg.method.uses_teacher().then_some(&f.teacher_out),
        cfg,
    };
    f.student.student_loss(&mut tape, 0, &f.image, f.label, &ctx).unwrap()
}

#[test]
fn alpha_zero_reduces_to_ce_plus_pool() {
    let f = fixture(DistillMethod::Kdp);
    let mut cfg = DistillConfig::new(DistillMethod::Kdp);
    cfg.alpha = 0.0;
    let parts = loss_of(&f, &cfg);
    assert!((parts.total_value - (parts.ce + cfg.lambda * parts.pool)).abs() < 1e-12);

    // the distillation branch carries no gradient: the kd classifier stays
    // zero-gradient
    let mut tape = Tape::new();
    let ctx = StudentLossCtx {
        task: 0,
        active: &f.active,
        scope: &f.scope,
        teacher: Some(&f.teacher_out),
        cfg: &cfg,
    };
    let parts = f.student.student_loss(&mut tape, 0, &f.image, f.label, &ctx).unwrap();
    let grads = tape.backward(parts.total).unwrap();
    let kd_w = f.student.kd_head.as_ref().unwrap().weight;
    let g = grads.get(kd_w).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0), "kd head must be inert at alpha=0");
}

#[test]
fn alpha_one_kills_the_classification_gradient() {
    let f = fixture(DistillMethod::Kdp);
    let mut cfg = DistillConfig::new(DistillMethod::Kdp);
    cfg.alpha = 1.0;
    let mut tape = Tape::new();
    let ctx = StudentLossCtx {
        task: 0,
        active: &f.active,
        scope: &f.scope,
        teacher: Some(&f.teacher_out),
        cfg: &cfg,
    };
    let parts = f.student.student_loss(&mut tape, 0, &f.image, f.label, &ctx).unwrap();
    let grads = tape.backward(parts.total).unwrap();
    let class_w = f.student.head.weight;
    let g = grads.get(class_w).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0), "class head must be inert at alpha=1");
    // but the kd classifier trains
    let kd_w = f.student.kd_head.as_ref().unwrap().weight;
    assert!(grads.get(kd_w).unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn paper_defaults_are_pinned() {
    let cfg = DistillConfig::new(DistillMethod::Kdp);
    assert_eq!(cfg.alpha, 0.5);
    assert_eq!(cfg.lambda, 1.0);
    assert_eq!(cfg.tau, 2.0);
    assert_eq!(cfg.kd_prompt_len, 6);
    assert_eq!(cfg.prompt_depth(4), 4, "prompt coverage defaults to every block");
    assert_eq!(DistillConfig::new(DistillMethod::Kd).prompt_depth(4), 0);
    let adam = cdl_core::adam::AdamState::new(&[1], 0.001);
    assert_eq!(adam.lr, 0.001);
}

#[test]
fn kdp_with_zero_prompt_depth_equals_deit_bitwise() {
    let f = fixture(DistillMethod::Deit);
    let mut kdp = DistillConfig::new(DistillMethod::Kdp);
    kdp.kd_prompt_depth = Some(0);
    let deit = DistillConfig::new(DistillMethod::Deit);
    let a = loss_of(&f, &kdp);
    let b = loss_of(&f, &deit);
    assert!((a.total_value - b.total_value).abs() <= 1e-12);
    assert_eq!(a.total_value.to_bits(), b.total_value.to_bits());
}

#[test]
fn kd_prompts_sit_on_the_differentiable_path() {
    let f = fixture(DistillMethod::Kdp);
    let cfg = DistillConfig::new(DistillMethod::Kdp);
    let mut tape = Tape::new();
    let ctx = StudentLossCtx {
        task: 0,
        active: &f.active,
        scope: &f.scope,
        teacher: Some(&f.teacher_out),
        cfg: &cfg,
    };
    let parts = f.student.student_loss(&mut tape, 0, &f.image, f.label, &ctx).unwrap();
    let grads = tape.backward(parts.total).unwrap();
    assert!(!f.student.kd_prompts.is_empty());
    for &p in &f.student.kd_prompts {
        let g = grads.get(p).expect("prompt gradient present");
        assert!(g.data().iter().any(|&v| v != 0.0), "prompt gradient must be nonzero");
    }
    // frozen backbone stays out of the gradient map
    assert!(!grads.contains(f.student.backbone.patch_w));
}

#[test]
fn missing_teacher_snapshot_is_contract_violation() {
    let f = fixture(DistillMethod::Kdp);
    let cfg = DistillConfig::new(DistillMethod::Kdp);
    let mut tape = Tape::new();
    let ctx = StudentLossCtx { task: 0, active: &f.active, scope: &f.scope, teacher: None, cfg: &cfg };
    assert!(f.student.student_loss(&mut tape, 0, &f.image, f.label, &ctx).is_err());
}

#[test]
fn composite_losses_pass_finite_difference_for_every_method() {
    for method in [
        DistillMethod::None,
        DistillMethod::Kd,
        DistillMethod::Dkd,
        DistillMethod::FitNets,
        DistillMethod::ReviewKd,
        DistillMethod::Deit,
        DistillMethod::Kdp,
    ] {
        let f = fixture(method);
        let cfg = DistillConfig::new(method);
        let q = f.student.query(0, &f.image).unwrap();
        let mut store = f.student.store.clone();
        let mut builder = |s: &ParamStore, t: &mut Tape| {
            let ctx = StudentLossCtx {
                task: 0,
                active: &f.active,
                scope: &f.scope,
                teacher: cfg.method.uses_teacher().then_some(&f.teacher_out),
                cfg: &cfg,
            };
            Ok(f
                .student
                .student_loss_with(t, s, &q, &f.image, f.label, &ctx)?
                .total)
        };
        let report = finite_difference_check(&mut builder, &mut store, 1e-4).unwrap();
        assert!(
            report.max_rel_err <= 1e-3,
            "{}: composite gradient error {} at {}[{}]",
            method.as_str(),
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
        assert!(report.checked_params > 0);
    }
}

#[test]
fn pretrain_zero_epochs_gives_usable_random_backbone() {
    let data = tiny_dataset();
    let out = pretrain_backbone(&tiny_student(), &data, 0, 0.001, 8, 3).unwrap();
    assert!(!out.backbone.is_empty());
    assert!(out.backbone.iter().all(|(n, _)| n.starts_with("backbone/")));
}

#[test]
fn teacher_pretrains_better_than_student_across_seeds() {
    let data = Dataset::generate(&DatasetSpec {
        classes: 8,
        pretrain_classes: 6,
        image_size: 8,
        channels: 1,
        train_per_class: 40,
        test_per_class: 12,
        noise_sigma: 0.15,
        shift_jitter: 2,
        contrast_jitter: 0.3,
        seed: 13,
    })
    .unwrap();
    let mut teacher_wins = 0;
    let mut t_mean = 0.0;
    let mut s_mean = 0.0;
    for seed in 0..3 {
        let t = pretrain_backbone(&tiny_teacher(), &data, 16, 0.001, 8, seed).unwrap();
        let s = pretrain_backbone(&tiny_student(), &data, 16, 0.001, 8, seed).unwrap();
        if t.holdout_acc > s.holdout_acc {
            teacher_wins += 1;
        }
        t_mean += t.holdout_acc / 3.0;
        s_mean += s.holdout_acc / 3.0;
    }
    assert!(teacher_wins >= 2, "teacher won only {teacher_wins}/3 pretraining comparisons");
    assert!(t_mean > s_mean, "teacher mean {t_mean} <= student mean {s_mean}");
}

#[test]
fn zero_learning_rate_leaves_the_model_unchanged() {
    let data = tiny_dataset();
    let stream = cdl_core::data::make_task_stream(&data, 2, 9).unwrap();
    let pre = pretrained(&tiny_student(), &data, 0, 31);
    let mut rng = SeededRng::new(8);
    let mut vit = tiny_student();
    vit.class_capacity = stream.cl_classes;
    let mut model = ContinualModel::assemble(
        "student",
        vit.clone(),
        pool_spec(PoolMethod::L2P, PoolPreset::Desk, vit.blocks, 2),
        &pre,
        HeadRole::Student,
        None,
        FreezeMode::All,
        &mut rng,
    )
    .unwrap();
    let before: Vec<u64> = model
        .store
        .ids()
        .map(|id| model.store.value(id).bit_checksum())
        .collect();
    let mut cfg = tiny_run(DistillMethod::None, 9, false);
    cfg.learning_rate = 0.0;
    cfg.epochs = 1;
    let order = SeededRng::new(9).split("batch-order");
    let none = DistillConfig::new(DistillMethod::None);
    train_task(&mut model, &data, &stream, 0, &cfg, &none, None, &order).unwrap();
    let after: Vec<u64> = model
        .store
        .ids()
        .map(|id| model.store.value(id).bit_checksum())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn training_loss_decreases_for_all_three_pool_methods() {
    let data = tiny_dataset();
    let stream = cdl_core::data::make_task_stream(&data, 2, 12).unwrap();
    for method in [PoolMethod::L2P, PoolMethod::DualPrompt, PoolMethod::Coda] {
        let pre = pretrained(&tiny_student(), &data, 2, 41);
        let mut rng = SeededRng::new(10);
        let mut vit = tiny_student();
        vit.class_capacity = stream.cl_classes;
        let mut model = ContinualModel::assemble(
            "student",
            vit.clone(),
            pool_spec(method, PoolPreset::Desk, vit.blocks, 2),
            &pre,
            HeadRole::Student,
            None,
            FreezeMode::All,
            &mut rng,
        )
        .unwrap();
        let mut cfg = tiny_run(DistillMethod::None, 12, false);
        cfg.epochs = 5;
        let order = SeededRng::new(12).split("batch-order");
        let none = DistillConfig::new(DistillMethod::None);
        let stats = train_task(&mut model, &data, &stream, 0, &cfg, &none, None, &order).unwrap();
        let losses = &stats.epoch_losses;
        assert_eq!(losses.len(), 5);
        let decreases = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(
            decreases >= 3 && losses[4] < losses[0],
            "{}: losses {losses:?}",
            method.as_str()
        );
    }
}

#[test]
fn cdl_run_protocol_shape_audits_and_determinism() {
    let data = tiny_dataset();
    let stream = cdl_core::data::make_task_stream(&data, 2, 14).unwrap();
    let pre_s = pretrained(&tiny_student(), &data, 1, 51);
    let pre_t = pretrained(&tiny_teacher(), &data, 1, 52);
    let cfg = tiny_run(DistillMethod::Kdp, 14, true);

    let out1 = cdl_run(&cfg, &data, &stream, &pre_s, Some(&pre_t)).unwrap();
    assert!(out1.student_matrix.is_complete());
    assert!(out1.teacher_matrix.as_ref().unwrap().is_complete());
    // audits
    assert!(out1.audit.student_backbone_constant());
    assert!(out1.audit.teacher_backbone_constant());
    assert!(out1.audit.teacher_snapshot_stable);
    assert!(out1.audit.teacher_stable_during_student);
    assert_eq!(out1.audit.out_of_task_reads, 0);
    // reads: teacher and student each touch every task sample once per epoch
    let task_samples = stream.tasks[0].train.len() as u64;
    for &reads in &out1.audit.per_task_train_reads {
        assert_eq!(reads, task_samples * cfg.epochs as u64);
    }

    // bit-identical replay
    let out2 = cdl_run(&cfg, &data, &stream, &pre_s, Some(&pre_t)).unwrap();
    assert_eq!(out1.student_matrix, out2.student_matrix);
    assert_eq!(out1.teacher_matrix, out2.teacher_matrix);
}

#[test]
fn method_none_ignores_a_present_teacher_bitwise() {
    let data = tiny_dataset();
    let stream = cdl_core::data::make_task_stream(&data, 2, 15).unwrap();
    let pre_s = pretrained(&tiny_student(), &data, 1, 53);
    let pre_t = pretrained(&tiny_teacher(), &data, 1, 54);

    let with_teacher = {
        let mut c = tiny_run(DistillMethod::None, 15, true);
        c.eval_teacher = true;
        c
    };
    let without_teacher = tiny_run(DistillMethod::None, 15, false);

    let a = cdl_run(&with_teacher, &data, &stream, &pre_s, Some(&pre_t)).unwrap();
    let b = cdl_run(&without_teacher, &data, &stream, &pre_s, None).unwrap();
    assert_eq!(a.student_matrix, b.student_matrix, "student path must not depend on the teacher");
}

#[test]
fn single_task_run_reports_undefined_forgetting_as_zero() {
    let data = tiny_dataset();
    let stream = cdl_core::data::make_task_stream(&data, 1, 16).unwrap();
    let pre_s = pretrained(&tiny_student(), &data, 1, 55);
    let mut cfg = tiny_run(DistillMethod::None, 16, false);
    cfg.tasks = 1;
    let out = cdl_run(&cfg, &data, &stream, &pre_s, None).unwrap();
    assert_eq!(out.student_report.forgetting, 0.0);
    assert!(!out.student_report.forgetting_defined);
}

#[test]
fn unfreeze_ablation_touches_only_the_last_block() {
    let data = tiny_dataset();
    let stream = cdl_core::data::make_task_stream(&data, 2, 17).unwrap();
    let pre_s = pretrained(&tiny_student(), &data, 1, 56);
    let mut cfg = tiny_run(DistillMethod::None, 17, false);
    cfg.unfreeze_last_block = true;
    let out = cdl_run(&cfg, &data, &stream, &pre_s, None).unwrap();
    assert!(!out.audit.student_backbone_diff.is_empty(), "last block must move");
    let last = format!("backbone/block{}", tiny_student().blocks - 1);
    for name in &out.audit.student_backbone_diff {
        assert!(name.starts_with(&last), "{name} changed outside the last block");
    }
}

#[test]
fn feature_methods_run_end_to_end() {
    let data = tiny_dataset();
    let stream = cdl_core::data::make_task_stream(&data, 2, 18).unwrap();
    let pre_s = pretrained(&tiny_student(), &data, 1, 57);
    let pre_t = pretrained(&tiny_teacher(), &data, 1, 58);
    for method in [DistillMethod::FitNets, DistillMethod::ReviewKd, DistillMethod::Kd, DistillMethod::Dkd, DistillMethod::Deit] {
        let mut cfg = tiny_run(method, 18, true);
        cfg.epochs = 1;
        cfg.eval_teacher = false;
        let out = cdl_run(&cfg, &data, &stream, &pre_s, Some(&pre_t)).unwrap();
        assert!(out.student_matrix.is_complete(), "{}", method.as_str());
        assert!(out.teacher_matrix.is_none());
    }
}

#[test]
fn multi_student_run_is_bitwise_equal_to_solo_runs() {
    let data = tiny_dataset();
    let stream = cdl_core::data::make_task_stream(&data, 2, 22).unwrap();
    let pre_s = pretrained(&tiny_student(), &data, 1, 61);
    let pre_t = pretrained(&tiny_teacher(), &data, 1, 62);
    let base = tiny_run(DistillMethod::Kdp, 22, true);

    let variants = vec![
        ("none".to_string(), DistillConfig::new(DistillMethod::None)),
        ("kd".to_string(), DistillConfig::new(DistillMethod::Kd)),
        ("kdp".to_string(), DistillConfig::new(DistillMethod::Kdp)),
    ];
    let multi =
        cdl_core::harness::cdl_run_multi(&base, &variants, &data, &stream, &pre_s, Some(&pre_t))
            .unwrap();

    for (label, dcfg) in &variants {
        let mut solo_cfg = base.clone();
        solo_cfg.distill = dcfg.clone();
        let solo = cdl_run(&solo_cfg, &data, &stream, &pre_s, Some(&pre_t)).unwrap();
        let ours = multi.students.iter().find(|s| &s.label == label).unwrap();
        assert_eq!(
            ours.matrix, solo.student_matrix,
            "{label}: shared-teacher run must match the solo protocol bit for bit"
        );
    }
    assert_eq!(multi.teacher_matrix.as_ref(), {
        let mut solo_cfg = base.clone();
        solo_cfg.distill = DistillConfig::new(DistillMethod::Kd);
        Some(&cdl_run(&solo_cfg, &data, &stream, &pre_s, Some(&pre_t)).unwrap().teacher_matrix.unwrap())
    }.as_deref());
}

#[test]
fn snapshot_outputs_are_cached_and_stable() {
    let data = tiny_dataset();
    let stream = cdl_core::data::make_task_stream(&data, 2, 19).unwrap();
    let pre_t = pretrained(&tiny_teacher(), &data, 1, 59);
    let mut rng = SeededRng::new(20);
    let mut tv = tiny_teacher();
    tv.class_capacity = stream.cl_classes;
    let teacher = ContinualModel::assemble(
        "teacher",
        tv.clone(),
        pool_spec(PoolMethod::Coda, PoolPreset::Desk, tv.blocks, 2),
        &pre_t,
        HeadRole::Teacher,
        None,
        FreezeMode::All,
        &mut rng,
    )
    .unwrap();
    let snap = TeacherSnapshot::of(&teacher, 0, vec![0, 2]);
    let img = data.image(stream.tasks[0].train[0]);
    let a = snap.outputs(0, &img).unwrap();
    let b = snap.outputs(0, &img).unwrap();
    assert!(std::rc::Rc::ptr_eq(&a, &b), "second fetch must hit the cache");
    assert_eq!(a.logits.len(), stream.cl_classes);
    assert_eq!(a.features.len(), 2);
    assert!(snap.verify_unchanged());

    // evaluate() on the teacher exercises the pool's test-time routing
    let seen = stream.seen_labels(&data, 0);
    let acc = evaluate(&teacher, &data, &stream, &stream.tasks[0].test, &seen).unwrap();
    assert!((0.0..=100.0).contains(&acc));
}
