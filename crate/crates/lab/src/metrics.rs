//! Metrics CSV and run summary.

use std::path::Path;

use collapse_core::trainer::{MetricsRecord, RunResult};
use serde::Serialize;

use crate::error::{LabError, Result};

pub fn csv_header() -> &'static str {
    MetricsRecord::CSV_HEADER
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(csv_header());
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(records)).map_err(|e| LabError::io(path, e))
}

/// One parsed metrics row, columns by header name.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub values: Vec<(String, f64)>,
}

impl CsvRow {
    pub fn get(&self, column: &str) -> Option<f64> {
        self.values.iter().find(|(c, _)| c == column).map(|(_, v)| *v)
    }
}

pub fn parse_csv(text: &str, origin: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, h)) if h == csv_header() => h.split(',').map(String::from).collect(),
        _ => {
            return Err(LabError::Parse {
                origin: origin.into(),
                line: 1,
                msg: "missing or unexpected metrics header".into(),
            })
        }
    };
    lines
        .map(|(i, line)| {
            let err = |msg: String| LabError::Parse {
                origin: origin.into(),
                line: i + 1,
                msg,
            };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(err(format!("expected {} columns, found {}", header.len(), cells.len())));
            }
            let values = header
                .iter()
                .zip(cells)
                .map(|(h, c)| c.parse::<f64>().map(|v| (h.clone(), v)).map_err(|_| err(format!("{h}: bad number {c:?}"))))
                .collect::<Result<_>>()?;
            Ok(CsvRow { values })
        })
        .collect()
}

pub fn load_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_csv(&text, &path.display().to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub iterations_run: usize,
    pub early_stopped: bool,
    pub stop_reason: Option<&'static str>,
    /// Max success over evaluation checkpoints.
    pub peak_success: f64,
    pub final_metrics: Option<MetricsRecord>,
}

impl Summary {
    pub fn new(seed: u64, run: &RunResult) -> Self {
        Self {
            seed,
            iterations_run: run.records.len(),
            early_stopped: run.stop.is_some(),
            stop_reason: run.stop.map(|s| s.name()),
            peak_success: run.peak_success,
            final_metrics: run.records.last().copied(),
        }
    }
}
