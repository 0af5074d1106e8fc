//! Result rows and their CSV encoding.
//!
//! Schema: `run_id,seed,pool,distill,trained_task,eval_task,accuracy`.
//! Floats are written in shortest-round-trip form, so parse(format(row))
//! reproduces the row exactly.

use cdl_core::{CdlError, Result};

pub const CSV_HEADER: &str = "run_id,seed,pool,distill,trained_task,eval_task,accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run_id: String,
    pub seed: u64,
    pub pool: String,
    pub distill: String,
    pub trained_task: usize,
    pub eval_task: usize,
    pub accuracy: f64,
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.run_id, self.seed, self.pool, self.distill, self.trained_task, self.eval_task, self.accuracy
        )
    }

    pub fn parse(line: &str) -> Result<ReportRow> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(CdlError::Format(format!(
                "expected 7 CSV fields, got {}: {line}",
                parts.len()
            )));
        }
        let field = |i: usize, what: &str| -> Result<&str> {
            parts
                .get(i)
                .copied()
                .ok_or_else(|| CdlError::Format(format!("missing {what}")))
        };
        Ok(ReportRow {
            run_id: field(0, "run_id")?.to_string(),
            seed: parts[1]
                .parse()
                .map_err(|_| CdlError::Format(format!("bad seed in: {line}")))?,
            pool: field(2, "pool")?.to_string(),
            distill: field(3, "distill")?.to_string(),
            trained_task: parts[4]
                .parse()
                .map_err(|_| CdlError::Format(format!("bad trained_task in: {line}")))?,
            eval_task: parts[5]
                .parse()
                .map_err(|_| CdlError::Format(format!("bad eval_task in: {line}")))?,
            accuracy: parts[6]
                .parse()
                .map_err(|_| CdlError::Format(format!("bad accuracy in: {line}")))?,
        })
    }
}

pub fn write_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(CdlError::Format(format!(
                "bad CSV header: {other:?}, expected {CSV_HEADER}"
            )))
        }
    }
    lines.map(ReportRow::parse).collect()
}
