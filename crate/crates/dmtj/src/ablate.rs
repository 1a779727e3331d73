//! Cross products of config overrides, one training run and probe per cell.

use std::collections::BTreeMap;
use std::path::Path;

use dmtj_core::probe::ProbeKind;
use serde::Deserialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::data::{probe_splits, train_images, Unlabeled};
use crate::error::{IoError, IoResult};
use crate::evaluate::probe;
use crate::train::{pretrain, Outputs, TrainState};

/// `{"axes": {"model.neighbors.k": [1, 4], …}}`; axes run in key order.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Matrix {
    pub axes: BTreeMap<String, Vec<Value>>,
}

/// Every combination of axis values as `key=value` overrides; the last
/// axis varies fastest.
pub fn cells(matrix: &Matrix) -> Vec<Vec<String>> {
    let mut out = vec![Vec::new()];
    for (key, values) in &matrix.axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push(format!("{key}={v}"));
                    cell
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub overrides: Vec<String>,
    /// `Err` holds the reason the cell was skipped.
    pub outcome: Result<(f64, f64), String>,
}

fn run_cell(base: &RunConfig, overrides: &[String], pool: &rayon::ThreadPool) -> IoResult<(f64, f64)> {
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    let images = train_images(&cfg.data)?;
    let mut state = TrainState::new(cfg.clone())?;
    let metrics = pretrain(&mut state, Unlabeled::new(&images), &Outputs::default(), pool)?;
    let (train, test) = probe_splits(&cfg.data)?;
    let report = probe(&state.model, &train, &test, &cfg.probe, ProbeKind::Knn, pool)?;
    let final_loss = metrics.last().map_or(f64::NAN, |m| m.loss);
    Ok((report.accuracy, final_loss))
}

/// Runs every cell; infeasible cells are logged and skipped.
pub fn ablate(base: &RunConfig, matrix: &Matrix, pool: &rayon::ThreadPool) -> Vec<CellResult> {
    cells(matrix)
        .into_iter()
        .map(|overrides| {
            let outcome = run_cell(base, &overrides, pool).map_err(|e| {
                log::warn!("skipping cell {overrides:?}: {e}");
                e.to_string()
            });
            CellResult { overrides, outcome }
        })
        .collect()
}

/// Tab-separated table, one row per cell.
pub fn to_tsv(matrix: &Matrix, results: &[CellResult]) -> String {
    let mut s: String = matrix.axes.keys().map(|k| format!("{k}\t")).collect();
    s.push_str("knn_accuracy\tfinal_loss\tstatus\n");
    for r in results {
        for o in &r.overrides {
            s.push_str(o.split_once('=').map_or("", |(_, v)| v));
            s.push('\t');
        }
        match &r.outcome {
            Ok((acc, loss)) => s.push_str(&format!("{acc:.6}\t{loss:.6}\tok\n")),
            Err(e) => s.push_str(&format!("\t\tskipped: {}\n", e.replace(['\t', '\n'], " "))),
        }
    }
    s
}

pub fn load_matrix(path: &Path) -> IoResult<Matrix> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
