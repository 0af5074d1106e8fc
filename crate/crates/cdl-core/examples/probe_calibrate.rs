//! Calibration probe for the desk benchmark: runs the teacher-sharing
//! protocol for chosen seeds and prints the trend quantities.

use cdl_core::data::{make_task_stream, Dataset, DatasetSpec};
use cdl_core::distill::{DistillConfig, DistillMethod};
use cdl_core::harness::{cdl_run, cdl_run_multi, pretrain_backbone, PoolPreset, RunConfig};
use cdl_core::pools::PoolMethod;
use cdl_core::vit::ViTConfig;
use cdl_core::ParamStore;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let shift: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let contrast: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.2);
    let pretrain_epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(5);
    let n_seeds: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);
    let unfreeze_probe: bool = args.get(5).map(|s| s == "unfreeze").unwrap_or(false);
    let pool: PoolMethod = match args.get(6).map(String::as_str) {
        Some("l2p") => PoolMethod::L2P,
        Some("dual") => PoolMethod::DualPrompt,
        _ => PoolMethod::Coda,
    };
    let lambda: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1.0);

    let spec = DatasetSpec { shift_jitter: shift, contrast_jitter: contrast, ..DatasetSpec::default() };
    println!("spec: shift={shift} contrast={contrast} pretrain_epochs={pretrain_epochs}");
    let t_total = Instant::now();
    let data = Dataset::generate(&spec).unwrap();
    let student_vit = ViTConfig::desk_student(20);
    let teacher_vit = ViTConfig::desk_teacher(20);

    let t0 = Instant::now();
    let ps = pretrain_backbone(&student_vit, &data, pretrain_epochs, 0.001, 32, 0).unwrap();
    let pt = pretrain_backbone(&teacher_vit, &data, pretrain_epochs, 0.001, 32, 0).unwrap();
    println!("pretrain: student holdout {:.1}%, teacher holdout {:.1}% ({:.0}s)",
        ps.holdout_acc, pt.holdout_acc, t0.elapsed().as_secs_f64());
    let mut pre_s = ParamStore::new();
    for (n, t) in ps.backbone { pre_s.insert(n, t, false); }
    let mut pre_t = ParamStore::new();
    for (n, t) in pt.backbone { pre_t.insert(n, t, false); }

    let mut sums = [0.0f64; 5]; // teacher, none, kd, kdp acc, kdp forgetting
    let mut kd_forg = 0.0;
    let mut none_forg = 0.0;
    for seed in 0..n_seeds {
        let t0 = Instant::now();
        let stream = make_task_stream(&data, 5, seed).unwrap();
        let cfg = RunConfig {
            seed,
            tasks: 5,
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.001,
            pool_method: pool,
            pool_preset: PoolPreset::Desk,
            distill: DistillConfig::new(DistillMethod::Kdp),
            unfreeze_last_block: false,
            student: student_vit.clone(),
            teacher: Some(teacher_vit.clone()),
            eval_teacher: true,
        };
        let mut variants = vec![
            ("none".to_string(), DistillConfig::new(DistillMethod::None)),
            ("kd".to_string(), DistillConfig::new(DistillMethod::Kd)),
            ("kdp".to_string(), DistillConfig::new(DistillMethod::Kdp)),
        ];
        for (_, d) in variants.iter_mut() { d.lambda = lambda; }
        let out = cdl_run_multi(&cfg, &variants, &data, &stream, &pre_s, Some(&pre_t)).unwrap();
        if seed == 0 {
            let tm = out.teacher_matrix.as_ref().unwrap();
            for i in 0..5 {
                print!("  T[{i}]: ");
                for j in 0..=i { print!("{:5.1} ", tm.get(i, j)); }
                println!();
            }
            for s in &out.students {
                let m = &s.matrix;
                for i in 0..5 {
                    print!("  {}[{i}]: ", s.label);
                    for j in 0..=i { print!("{:5.1} ", m.get(i, j)); }
                    println!();
                }
            }
        }
        let t_acc = out.teacher_report.as_ref().unwrap().avg_acc;
        let t_forg = out.teacher_report.as_ref().unwrap().forgetting;
        print!("seed {seed}: teacher {:.2}/{:.2}", t_acc, t_forg);
        sums[0] += t_acc;
        for s in &out.students {
            print!("  {} {:.2}/{:.2}", s.label, s.report.avg_acc, s.report.forgetting);
            match s.label.as_str() {
                "none" => { sums[1] += s.report.avg_acc; none_forg += s.report.forgetting; }
                "kd" => { sums[2] += s.report.avg_acc; kd_forg += s.report.forgetting; }
                "kdp" => { sums[3] += s.report.avg_acc; sums[4] += s.report.forgetting; }
                _ => {}
            }
        }
        println!("  ({:.0}s)", t0.elapsed().as_secs_f64());
    }
    let n = n_seeds as f64;
    println!("means: teacher {:.2}  none {:.2} (f {:.2})  kd {:.2} (f {:.2})  kdp {:.2} (f {:.2})",
        sums[0]/n, sums[1]/n, none_forg/n, sums[2]/n, kd_forg/n, sums[3]/n, sums[4]/n);
    println!("5a teacher>none: {}   5b kdp-none: {:+.2}   5c kdp-kd: {:+.2}",
        sums[0] > sums[1], (sums[3]-sums[1])/n, (sums[3]-sums[2])/n);

    if unfreeze_probe {
        let t0 = Instant::now();
        let stream = make_task_stream(&data, 5, 0).unwrap();
        let cfg = RunConfig {
            seed: 0, tasks: 5, epochs: 5, batch_size: 32, learning_rate: 0.001,
            pool_method: PoolMethod::Coda, pool_preset: PoolPreset::Desk,
            distill: DistillConfig::new(DistillMethod::Kdp),
            unfreeze_last_block: true,
            student: student_vit.clone(), teacher: Some(teacher_vit.clone()),
            eval_teacher: false,
        };
        let out = cdl_run(&cfg, &data, &stream, &pre_s, Some(&pre_t)).unwrap();
        println!("unfreeze kdp: acc {:.2} forgetting {:.2} ({:.0}s)",
            out.student_report.avg_acc, out.student_report.forgetting, t0.elapsed().as_secs_f64());
    }
    println!("total {:.0}s", t_total.elapsed().as_secs_f64());
}
