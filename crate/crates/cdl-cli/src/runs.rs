//! Command implementations: dataset generation, backbone pretraining, the
//! (seed x method x sweep) run grid, and report emission.

use std::fs;
use std::path::{Path, PathBuf};

use cdl_core::data::Dataset;
use cdl_core::distill::DistillConfig;
use cdl_core::harness::{cdl_run, cdl_run_multi, pretrain_backbone, RunConfig};
use cdl_core::metrics::ResultMatrix;
use cdl_core::weights;
use cdl_core::{CdlError, ParamStore, Result};

use crate::config::{ExperimentConfig, RunCell};
use crate::report::{curves_csv, run_metrics, summarize, summary_text};
use crate::rows::{parse_csv, write_csv, ReportRow};

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path, seed: Option<u64>) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let mut spec = cfg.dataset.to_spec();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = Dataset::generate(&spec)?;
    let path = out.join("dataset.cdld");
    data.save(&path)?;
    let mut echo = cfg.dataset.clone();
    echo.seed = spec.seed;
    fs::write(
        out.join("dataset.echo.json"),
        serde_json::to_string_pretty(&echo).expect("dataset spec serializes"),
    )?;
    println!(
        "wrote {} ({} samples, {} classes, {} reserved for pretraining)",
        path.display(),
        data.len(),
        spec.classes,
        spec.pretrain_classes
    );
    Ok(path)
}

fn load_dataset(cfg: &ExperimentConfig, path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(CdlError::Config(format!(
            "dataset not found at {}; generate it with: cdl gen-data --config <config> --out {}",
            path.display(),
            path.parent().unwrap_or(Path::new(".")).display()
        )));
    }
    let data = Dataset::load(path, cfg.dataset.train_per_class, cfg.dataset.test_per_class)?;
    if data.spec.classes != cfg.dataset.classes
        || data.spec.pretrain_classes != cfg.dataset.pretrain_classes
        || data.spec.image_size != cfg.dataset.image_size
        || data.spec.channels != cfg.dataset.channels
    {
        return Err(CdlError::Config(format!(
            "dataset at {} does not match the configured spec",
            path.display()
        )));
    }
    Ok(data)
}

pub fn cmd_pretrain(
    cfg: &ExperimentConfig,
    data_path: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let data = load_dataset(cfg, data_path)?;
    let seed = seed.unwrap_or(cfg.seed);
    let classes = cfg.dataset.classes - cfg.dataset.pretrain_classes;

    let student_cfg = cfg.student.to_config(classes);
    let s = pretrain_backbone(&student_cfg, &data, cfg.pretrain_epochs, cfg.learning_rate, cfg.batch_size, seed)?;
    weights::save_entries(&out.join("student.cdlw"), &s.backbone)?;
    println!("student backbone pretrained: holdout accuracy {:.2}%", s.holdout_acc);

    if let Some(tj) = &cfg.teacher {
        let teacher_cfg = tj.to_config(classes);
        let t = pretrain_backbone(&teacher_cfg, &data, cfg.pretrain_epochs, cfg.learning_rate, cfg.batch_size, seed)?;
        weights::save_entries(&out.join("teacher.cdlw"), &t.backbone)?;
        println!("teacher backbone pretrained: holdout accuracy {:.2}%", t.holdout_acc);
    }
    Ok(())
}

fn load_backbone(path: &Path, what: &str, cfg_hint: &str) -> Result<ParamStore> {
    if !path.exists() {
        return Err(CdlError::Config(format!(
            "{what} backbone not found at {}; pretrain it with: cdl pretrain --config {cfg_hint} --out {}",
            path.display(),
            path.parent().unwrap_or(Path::new(".")).display()
        )));
    }
    weights::load_into_store(path, false)
}

fn matrix_rows(
    run_id: &str,
    seed: u64,
    pool: &str,
    distill: &str,
    m: &ResultMatrix,
) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for i in 0..m.tasks() {
        for j in 0..=i {
            rows.push(ReportRow {
                run_id: run_id.to_string(),
                seed,
                pool: pool.to_string(),
                distill: distill.to_string(),
                trained_task: i,
                eval_task: j,
                accuracy: m.get(i, j),
            });
        }
    }
    rows
}

struct CellPlan {
    cell: RunCell,
    run_cfg: RunConfig,
    /// This cell also reports the teacher matrix for its seed.
    reports_teacher: bool,
}

/// Executes every (seed x method x sweep) cell. With `share_teacher`, cells
/// of one seed share a single teacher trajectory (bit-identical results,
/// teacher trained once).
#[allow(clippy::too_many_arguments)]
pub fn cmd_run(
    cfg: &ExperimentConfig,
    data_path: &Path,
    models_dir: &Path,
    out: &Path,
    auto_gen: bool,
    jobs: usize,
    share_teacher: bool,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir)?;

    if auto_gen && !data_path.exists() {
        let dir = data_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        cmd_gen_data(cfg, &dir, None)?;
    }
    let data = load_dataset(cfg, data_path)?;
    let student_path = models_dir.join("student.cdlw");
    let teacher_path = models_dir.join("teacher.cdlw");
    if auto_gen && (!student_path.exists() || (cfg.teacher.is_some() && !teacher_path.exists())) {
        cmd_pretrain(cfg, data_path, models_dir, None)?;
    }
    let pre_student = load_backbone(&student_path, "student", "<config>")?;
    let pre_teacher = match &cfg.teacher {
        Some(_) => Some(load_backbone(&teacher_path, "teacher", "<config>")?),
        None => None,
    };

    // Plan cells; the first cell of each seed reports the teacher matrix.
    let cells = cfg.cells()?;
    let mut seen_seeds = std::collections::HashSet::new();
    let mut plans = Vec::new();
    for cell in cells {
        let mut run_cfg = cfg.run_config(&cell)?;
        let reports_teacher =
            cfg.teacher.is_some() && cfg.eval_teacher && seen_seeds.insert(cell.seed);
        run_cfg.eval_teacher = reports_teacher;
        if !cell.method.uses_teacher() && !reports_teacher {
            // an unused teacher would train for nothing
            run_cfg.teacher = None;
        }
        plans.push(CellPlan { cell, run_cfg, reports_teacher });
    }

    if share_teacher {
        run_cells_shared(cfg, &plans, &data, &pre_student, pre_teacher.as_ref(), &cells_dir)?;
    } else {
        run_cells_solo(cfg, &plans, &data, &pre_student, pre_teacher.as_ref(), &cells_dir, jobs)?;
    }

    // Deterministic merge in plan order.
    let mut all_rows = Vec::new();
    for plan in &plans {
        let text = fs::read_to_string(cells_dir.join(format!("{}.csv", plan.cell.run_id)))?;
        all_rows.extend(parse_csv(&text)?);
        if plan.reports_teacher {
            let tpath = cells_dir.join(format!("{}-teacher-s{}.csv", cfg.pool, plan.cell.seed));
            if tpath.exists() {
                all_rows.extend(parse_csv(&fs::read_to_string(tpath)?)?);
            }
        }
    }
    fs::write(out.join("results.csv"), write_csv(&all_rows))?;
    fs::write(out.join("config.echo.json"), cfg.echo_json())?;
    write_reports(&all_rows, out)?;
    println!("{} runs -> {}", plans.len(), out.join("results.csv").display());
    Ok(())
}

fn run_one_cell(
    cfg: &ExperimentConfig,
    plan: &CellPlan,
    data: &Dataset,
    pre_student: &ParamStore,
    pre_teacher: Option<&ParamStore>,
    cells_dir: &Path,
) -> Result<()> {
    let stream = cdl_core::data::make_task_stream(data, cfg.tasks, plan.cell.seed)?;
    let pre_t = if plan.run_cfg.teacher.is_some() { pre_teacher } else { None };
    let outcome = cdl_run(&plan.run_cfg, data, &stream, pre_student, pre_t)?;
    let rows = matrix_rows(
        &plan.cell.run_id,
        plan.cell.seed,
        &cfg.pool,
        plan.cell.method.as_str(),
        &outcome.student_matrix,
    );
    fs::write(cells_dir.join(format!("{}.csv", plan.cell.run_id)), write_csv(&rows))?;
    if plan.reports_teacher {
        if let Some(tm) = &outcome.teacher_matrix {
            let id = format!("{}-teacher-s{}", cfg.pool, plan.cell.seed);
            let rows = matrix_rows(&id, plan.cell.seed, &cfg.pool, "teacher", tm);
            fs::write(cells_dir.join(format!("{id}.csv")), write_csv(&rows))?;
        }
    }
    Ok(())
}

fn run_cells_solo(
    cfg: &ExperimentConfig,
    plans: &[CellPlan],
    data: &Dataset,
    pre_student: &ParamStore,
    pre_teacher: Option<&ParamStore>,
    cells_dir: &Path,
    jobs: usize,
) -> Result<()> {
    let jobs = jobs.max(1);
    if jobs == 1 {
        for plan in plans {
            run_one_cell(cfg, plan, data, pre_student, pre_teacher, cells_dir)?;
        }
        return Ok(());
    }
    // Bounded worker pool; every cell writes its own file.
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in plans.chunks(plans.len().div_ceil(jobs)) {
            handles.push(scope.spawn(move || {
                chunk
                    .iter()
                    .map(|plan| run_one_cell(cfg, plan, data, pre_student, pre_teacher, cells_dir))
                    .collect::<Vec<_>>()
            }));
        }
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    for r in results {
        r?;
    }
    Ok(())
}

fn run_cells_shared(
    cfg: &ExperimentConfig,
    plans: &[CellPlan],
    data: &Dataset,
    pre_student: &ParamStore,
    pre_teacher: Option<&ParamStore>,
    cells_dir: &Path,
) -> Result<()> {
    // Group plans by seed, preserving order.
    let mut seeds: Vec<u64> = Vec::new();
    for p in plans {
        if !seeds.contains(&p.cell.seed) {
            seeds.push(p.cell.seed);
        }
    }
    for seed in seeds {
        let group: Vec<&CellPlan> = plans.iter().filter(|p| p.cell.seed == seed).collect();
        let stream = cdl_core::data::make_task_stream(data, cfg.tasks, seed)?;
        let variants: Vec<(String, DistillConfig)> = group
            .iter()
            .map(|p| (p.cell.run_id.clone(), p.cell.distill.clone()))
            .collect();
        // The shared run needs the teacher whenever any variant distills or
        // the seed reports teacher metrics.
        let mut run_cfg = cfg.run_config(&group[0].cell)?;
        run_cfg.eval_teacher = group.iter().any(|p| p.reports_teacher);
        let needs_teacher = run_cfg.eval_teacher
            || group.iter().any(|p| p.cell.method.uses_teacher());
        if !needs_teacher {
            run_cfg.teacher = None;
        }
        let pre_t = if run_cfg.teacher.is_some() { pre_teacher } else { None };
        let outcome = cdl_run_multi(&run_cfg, &variants, data, &stream, pre_student, pre_t)?;
        for (plan, student) in group.iter().zip(&outcome.students) {
            let rows = matrix_rows(
                &plan.cell.run_id,
                seed,
                &cfg.pool,
                plan.cell.method.as_str(),
                &student.matrix,
            );
            fs::write(cells_dir.join(format!("{}.csv", plan.cell.run_id)), write_csv(&rows))?;
        }
        if let Some(tm) = &outcome.teacher_matrix {
            let id = format!("{}-teacher-s{seed}", cfg.pool);
            let rows = matrix_rows(&id, seed, &cfg.pool, "teacher", tm);
            fs::write(cells_dir.join(format!("{id}.csv")), write_csv(&rows))?;
        }
    }
    Ok(())
}

pub fn write_reports(rows: &[ReportRow], out: &Path) -> Result<()> {
    let metrics = run_metrics(rows)?;
    let summary = summarize(&metrics)?;
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    fs::write(out.join("summary.txt"), summary_text(&summary))?;
    fs::write(out.join("curves.csv"), curves_csv(&metrics))?;
    Ok(())
}

pub fn cmd_report(runs: &Path, out: Option<&Path>) -> Result<()> {
    let csv_path = if runs.is_dir() { runs.join("results.csv") } else { runs.to_path_buf() };
    if !csv_path.exists() {
        return Err(CdlError::Config(format!(
            "no results at {}; produce them with: cdl run --config <config> --out <dir>",
            csv_path.display()
        )));
    }
    let rows = parse_csv(&fs::read_to_string(&csv_path)?)?;
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| csv_path.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&out_dir)?;
    write_reports(&rows, &out_dir)?;
    let summary = summarize(&run_metrics(&rows)?)?;
    print!("{}", summary_text(&summary));
    Ok(())
}
