//! Class-incremental metrics: the lower-triangular accuracy matrix, average
//! accuracy over the final row, and forgetting.

use crate::error::{CdlError, Result};

/// R[i][j]: test accuracy (percent) on task j after finishing training task
/// i, defined for j <= i.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl ResultMatrix {
    pub fn new(tasks: usize) -> ResultMatrix {
        ResultMatrix { tasks, rows: (0..tasks).map(|i| vec![f64::NAN; i + 1]).collect() }
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, trained: usize, evaluated: usize, acc_percent: f64) {
        assert!(evaluated <= trained, "R[i][j] is defined for j <= i");
        assert!((0.0..=100.0).contains(&acc_percent), "accuracy {acc_percent} out of range");
        self.rows[trained][evaluated] = acc_percent;
    }

    pub fn get(&self, trained: usize, evaluated: usize) -> f64 {
        self.rows[trained][evaluated]
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(|v| v.is_finite()))
    }

    /// Accuracy on every task after the final one (the last row).
    pub fn final_row(&self) -> &[f64] {
        &self.rows[self.tasks - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Mean of the final row: (1/T) sum_i R[T][i].
pub fn avg_accuracy(r: &ResultMatrix) -> Result<f64> {
    if !r.is_complete() {
        return Err(CdlError::Contract("result matrix is incomplete".into()));
    }
    let row = r.final_row();
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean degradation of earlier tasks: (1/(T-1)) sum_{i<T} R[i][i] - R[T][i].
/// Positive when performance degrades.
pub fn forgetting(r: &ResultMatrix) -> Result<f64> {
    if !r.is_complete() {
        return Err(CdlError::Contract("result matrix is incomplete".into()));
    }
    let t = r.tasks();
    if t < 2 {
        return Err(CdlError::UndefinedMetric(
            "forgetting needs at least two tasks".into(),
        ));
    }
    let last = r.final_row();
    let sum: f64 = (0..t - 1).map(|i| r.get(i, i) - last[i]).sum();
    Ok(sum / (t - 1) as f64)
}

/// Summary of one continual run.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub avg_acc: f64,
    pub forgetting: f64,
    /// False when the run had a single task (forgetting reported as 0).
    pub forgetting_defined: bool,
    pub per_task_final: Vec<f64>,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_matrix(r: &ResultMatrix, seed: u64, wall_clock_secs: f64) -> Result<MetricsReport> {
        let avg = avg_accuracy(r)?;
        let (fg, defined) = match forgetting(r) {
            Ok(f) => (f, true),
            Err(CdlError::UndefinedMetric(_)) => (0.0, false),
            Err(e) => return Err(e),
        };
        Ok(MetricsReport {
            avg_acc: avg,
            forgetting: fg,
            forgetting_defined: defined,
            per_task_final: r.final_row().to_vec(),
            wall_clock_secs,
            seed,
        })
    }
}
