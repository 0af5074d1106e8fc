//! Result aggregation: per-run metrics from raw rows, per-method summaries
//! over seeds (mean ± population std), the prompt/classifier ablation grid,
//! sweep tables, and per-task accuracy curves.

use std::collections::BTreeMap;

use cdl_core::metrics::{avg_accuracy, forgetting, ResultMatrix};
use cdl_core::{CdlError, Result};
use serde::{Deserialize, Serialize};

use crate::rows::ReportRow;

/// Metrics of one completed run, rebuilt from its rows.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub run_id: String,
    pub seed: u64,
    pub pool: String,
    pub distill: String,
    pub avg_acc: f64,
    pub forgetting: f64,
    pub per_task_final: Vec<f64>,
}

/// One aggregated summary line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub pool: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kd_prompt_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kd_prompt_depth: Option<usize>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub forgetting_mean: f64,
    pub forgetting_std: f64,
    pub seeds: Vec<u64>,
}

/// The four-cell distillation-prompt x distillation-classifier grid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AblationGrid {
    /// Rows: (kd_prompts, kd_classifier, acc_mean, forgetting_mean).
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridCell {
    pub kd_prompts: bool,
    pub kd_classifier: bool,
    pub method_key: String,
    pub acc_mean: f64,
    pub forgetting_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Summary {
    pub rows: Vec<MethodSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub grid: Option<AblationGrid>,
}

/// Groups raw rows into complete lower-triangular matrices and computes each
/// run's metrics.
pub fn run_metrics(rows: &[ReportRow]) -> Result<Vec<RunMetrics>> {
    if rows.is_empty() {
        return Err(CdlError::Contract("no result rows; nothing to report".into()));
    }
    let mut grouped: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        grouped.entry(r.run_id.clone()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (run_id, rows) in grouped {
        let tasks = rows
            .iter()
            .map(|r| r.trained_task + 1)
            .max()
            .expect("non-empty group");
        let mut m = ResultMatrix::new(tasks);
        for r in &rows {
            if r.eval_task > r.trained_task {
                return Err(CdlError::Format(format!(
                    "{run_id}: eval task {} after training only {}",
                    r.eval_task, r.trained_task
                )));
            }
            m.set(r.trained_task, r.eval_task, r.accuracy);
        }
        if !m.is_complete() {
            return Err(CdlError::Format(format!("{run_id}: incomplete result matrix")));
        }
        let fg = match forgetting(&m) {
            Ok(f) => f,
            Err(CdlError::UndefinedMetric(_)) => 0.0,
            Err(e) => return Err(e),
        };
        out.push(RunMetrics {
            run_id,
            seed: rows[0].seed,
            pool: rows[0].pool.clone(),
            distill: rows[0].distill.clone(),
            avg_acc: avg_accuracy(&m)?,
            forgetting: fg,
            per_task_final: m.final_row().to_vec(),
        });
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn pop_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Method key: the run id with its seed component removed, so sweep suffixes
/// stay distinguishing.
fn method_key(run_id: &str, seed: u64) -> String {
    run_id.replace(&format!("-s{seed}"), "")
}

/// Aggregates run metrics into per-method summaries over seeds.
pub fn summarize(metrics: &[RunMetrics]) -> Result<Summary> {
    if metrics.is_empty() {
        return Err(CdlError::Contract("no runs; nothing to report".into()));
    }
    let mut grouped: BTreeMap<String, Vec<&RunMetrics>> = BTreeMap::new();
    for m in metrics {
        grouped.entry(method_key(&m.run_id, m.seed)).or_default().push(m);
    }
    let mut rows = Vec::new();
    for (key, group) in &grouped {
        let accs: Vec<f64> = group.iter().map(|m| m.avg_acc).collect();
        let fgs: Vec<f64> = group.iter().map(|m| m.forgetting).collect();
        let mut seeds: Vec<u64> = group.iter().map(|m| m.seed).collect();
        seeds.sort_unstable();
        rows.push(MethodSummary {
            method: group[0].distill.clone(),
            pool: group[0].pool.clone(),
            kd_prompt_len: parse_suffix(key, "-plen"),
            kd_prompt_depth: parse_suffix(key, "-pdep"),
            acc_mean: mean(&accs),
            acc_std: pop_std(&accs),
            forgetting_mean: mean(&fgs),
            forgetting_std: pop_std(&fgs),
            seeds,
        });
    }
    let grid = detect_grid(&rows);
    Ok(Summary { rows, grid })
}

fn parse_suffix(key: &str, tag: &str) -> Option<usize> {
    key.find(tag).and_then(|i| {
        key[i + tag.len()..]
            .chars()
            .take_while(|c| c.is_ascii_digit())
            .collect::<String>()
            .parse()
            .ok()
    })
}

/// The grid exists when the four prompt/classifier combinations are present:
/// plain soft-target distillation (neither), the same with distillation
/// prompts (prompts only), the token/classifier route (classifier only), and
/// the full prompt-based method (both).
fn detect_grid(rows: &[MethodSummary]) -> Option<AblationGrid> {
    let find = |pred: &dyn Fn(&&MethodSummary) -> bool| rows.iter().find(|r| pred(r));
    let kd_plain = find(&|r| {
        r.method == "kd" && r.kd_prompt_depth.unwrap_or(0) == 0 && r.kd_prompt_len.is_none()
    })?;
    let kd_prompts = find(&|r| r.method == "kd" && r.kd_prompt_depth.unwrap_or(0) > 0)?;
    let deit = find(&|r| r.method == "deit")?;
    let kdp = find(&|r| r.method == "kdp")?;
    let cell = |r: &MethodSummary, p: bool, c: bool| GridCell {
        kd_prompts: p,
        kd_classifier: c,
        method_key: format!(
            "{}{}{}",
            r.method,
            r.kd_prompt_len.map(|l| format!("-plen{l}")).unwrap_or_default(),
            r.kd_prompt_depth.map(|d| format!("-pdep{d}")).unwrap_or_default()
        ),
        acc_mean: r.acc_mean,
        forgetting_mean: r.forgetting_mean,
    };
    Some(AblationGrid {
        cells: vec![
            cell(kd_plain, false, false),
            cell(kd_prompts, true, false),
            cell(deit, false, true),
            cell(kdp, true, true),
        ],
    })
}

/// Human-readable summary table.
pub fn summary_text(summary: &Summary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>18} {:>18}  seeds\n",
        "method", "avg acc (%)", "forgetting"
    ));
    for r in &summary.rows {
        let mut name = format!("{}/{}", r.pool, r.method);
        if let Some(l) = r.kd_prompt_len {
            name.push_str(&format!(" len={l}"));
        }
        if let Some(d) = r.kd_prompt_depth {
            name.push_str(&format!(" depth={d}"));
        }
        out.push_str(&format!(
            "{:<28} {:>9.2} ± {:<6.2} {:>9.2} ± {:<6.2}  {:?}\n",
            name, r.acc_mean, r.acc_std, r.forgetting_mean, r.forgetting_std, r.seeds
        ));
    }
    if let Some(grid) = &summary.grid {
        out.push_str("\nprompt/classifier ablation grid:\n");
        out.push_str("  prompts classifier        acc  forgetting\n");
        for c in &grid.cells {
            out.push_str(&format!(
                "  {:<7} {:<10} {:>10.2} {:>11.2}\n",
                if c.kd_prompts { "yes" } else { "no" },
                if c.kd_classifier { "yes" } else { "no" },
                c.acc_mean,
                c.forgetting_mean
            ));
        }
    }
    out
}

/// Per-task final-accuracy curve rows: `run_id,seed,pool,distill,task,accuracy`.
pub fn curves_csv(metrics: &[RunMetrics]) -> String {
    let mut out = String::from("run_id,seed,pool,distill,task,accuracy\n");
    for m in metrics {
        for (task, acc) in m.per_task_final.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                m.run_id, m.seed, m.pool, m.distill, task, acc
            ));
        }
    }
    out
}
