//! CSV and JSON exports of evaluation results.
//!
//! Floats are written in shortest round-trip form so aggregates can be
//! recomputed exactly from the raw rows.

use std::path::Path;

use serde::Serialize;

use super::loo::EvaluationReport;
use super::search::{Arm, SearchReport};
use super::studies::{AddingTasksReport, EmbeddingStudy};
use crate::db::write_atomic;
use crate::{Error, Result};

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::InvalidState(format!("csv encoding failed: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidState(format!("csv encoding failed: {e}")))
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn loo_rows_csv(report: &EvaluationReport) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "task_id",
            "mode",
            "repeat",
            "spearman",
            "r2",
            "num_records",
            "train_steps",
        ],
        report.rows.iter().map(|r| {
            vec![
                r.task_id.clone(),
                r.mode.name().into(),
                r.repeat.to_string(),
                r.spearman.to_string(),
                r.r2.to_string(),
                r.num_records.to_string(),
                r.train_steps.to_string(),
            ]
        }),
    )
}

/// One row per task with a spearman/r2 column pair per mode.
pub fn loo_table_csv(report: &EvaluationReport) -> Result<Vec<u8>> {
    let mut modes = Vec::new();
    for s in &report.summary {
        if !modes.contains(&s.mode) {
            modes.push(s.mode);
        }
    }
    let mut tasks: Vec<&str> = Vec::new();
    for s in &report.summary {
        if !tasks.contains(&s.task_id.as_str()) {
            tasks.push(&s.task_id);
        }
    }
    let mut header = vec!["task_id".to_string()];
    for m in &modes {
        for col in ["spearman_mean", "spearman_std", "r2_mean", "r2_std"] {
            header.push(format!("{}_{col}", m.name()));
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(
        &header_refs,
        tasks.iter().map(|t| {
            let mut row = vec![t.to_string()];
            for &m in &modes {
                match report.summary_for(t, m) {
                    Some(s) => row.extend(
                        [s.spearman_mean, s.spearman_std, s.r2_mean, s.r2_std]
                            .map(|v| v.to_string()),
                    ),
                    None => row.extend(std::iter::repeat_n(String::new(), 4)),
                }
            }
            row
        }),
    )
}

pub fn curve_csv(report: &AddingTasksReport) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "test_task",
            "ordering",
            "num_tasks",
            "training",
            "spearman",
            "r2",
        ],
        report.rows.iter().map(|r| {
            vec![
                report.test_task.clone(),
                r.ordering.to_string(),
                r.num_tasks.to_string(),
                r.training.to_string(),
                r.spearman.to_string(),
                r.r2.to_string(),
            ]
        }),
    )
}

pub fn pca_csv(study: &EmbeddingStudy) -> Result<Vec<u8>> {
    csv_bytes(
        &["task_id", "batch_index", "pc1", "pc2"],
        study.points.iter().map(|p| {
            vec![
                p.task_id.clone(),
                p.batch_index.to_string(),
                p.pc1.to_string(),
                p.pc2.to_string(),
            ]
        }),
    )
}

pub fn search_csv(report: &SearchReport) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "task_id",
            "arm",
            "index",
            "predicted",
            "validation_accuracy",
            "test_accuracy",
        ],
        report.rows.iter().map(|r| {
            vec![
                r.task_id.clone(),
                match r.arm {
                    Arm::Proposed => "proposed".into(),
                    Arm::Random => "random".into(),
                },
                r.index.to_string(),
                opt(r.predicted),
                r.validation_accuracy.to_string(),
                r.test_accuracy.to_string(),
            ]
        }),
    )
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn write_report(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, bytes)
}
