//! Run results: a JSON document with the resolved configuration and a CSV
//! table of the accuracy matrix.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cl::TaskReport;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::AccuracyMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub version: String,
    pub config: ExperimentConfig,
    pub class_order: Vec<usize>,
    pub task_classes: Vec<Vec<usize>>,
    pub matrix: AccuracyMatrix,
    pub a_last: f64,
    pub a_inc: f64,
    pub tasks: Vec<TaskReport>,
    pub total_seconds: f64,
}

impl RunResult {
    /// Copy with every wall-clock field zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunResult {
        let mut r = self.clone();
        r.total_seconds = 0.0;
        for t in &mut r.tasks {
            t.seconds = 0.0;
        }
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("no values to summarize".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(MeanStd { mean, std: var.sqrt() })
    }
}

/// Several runs of one configuration with consecutive seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub a_last: MeanStd,
    pub a_inc: MeanStd,
    pub runs: Vec<RunResult>,
}

impl Summary {
    pub fn new(runs: Vec<RunResult>) -> Result<Self> {
        let a_last: Vec<f64> = runs.iter().map(|r| r.a_last).collect();
        let a_inc: Vec<f64> = runs.iter().map(|r| r.a_inc).collect();
        Ok(Summary { a_last: MeanStd::of(&a_last)?, a_inc: MeanStd::of(&a_inc)?, runs })
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Training(format!("cannot serialize results: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("cannot parse results: {e}")))
}

/// One row per (run, stage): seed, stage, cumulative accuracy, then the
/// accuracy on each task (empty for tasks not yet seen).
pub fn matrix_csv(runs: &[RunResult]) -> Result<String> {
    let width = runs.iter().map(|r| r.config.tasks).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["seed".to_string(), "stage".into(), "cumulative_accuracy".into()];
    header.extend((1..=width).map(|t| format!("task_{t}")));
    let csv_err = |e: csv::Error| Error::Training(format!("cannot write csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for run in runs {
        for rec in &run.matrix.after_task {
            let mut row = vec![run.config.seed.to_string(), rec.stage.to_string(), rec.cumulative_accuracy.to_string()];
            row.extend((0..width).map(|t| rec.per_task_accuracy.get(t).map_or(String::new(), |a| a.to_string())));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Training(format!("cannot write csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of numbers is utf-8"))
}

/// The CSV path that accompanies a JSON result path.
pub fn csv_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("csv")
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn emit_results(result: &RunResult, path: &Path) -> Result<()> {
    write(path, &to_json(result)?)?;
    write(&csv_path(path), &matrix_csv(std::slice::from_ref(result))?)
}

pub fn emit_summary(summary: &Summary, path: &Path) -> Result<()> {
    write(path, &to_json(summary)?)?;
    write(&csv_path(path), &matrix_csv(&summary.runs)?)
}

pub fn read_results(path: &Path) -> Result<RunResult> {
    from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
