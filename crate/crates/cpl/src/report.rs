//! Analysis bundle extracted from run logs.
//!
//! For each run directory, `<out>/<run name>/` receives:
//!
//! - `pout.csv`: `step, batch_id, p_out, pl_distance` per unlabeled step
//! - `scatter.csv`: `step, pl_distance, oracle_wer` per unlabeled step
//! - `tau.csv`: `step, tau` per update
//! - `blank.csv`: `step, blank_fraction, pl_length_ratio` per update that
//!   generated pseudo-labels
//! - `correlation.json`: Pearson r between `pl_distance` and `oracle_wer`

use std::path::{Path, PathBuf};

use cpl_core::trainer::{correlation_pairs, oracle_correlation, Branch, Correlation, StepRecord};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::run::STEPS_FILE;
use crate::steplog::read_steps;
use crate::sweep::write_csv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoutRow {
    pub step: u64,
    pub batch_id: Option<u64>,
    pub p_out: Option<f64>,
    pub pl_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub step: u64,
    pub pl_distance: Option<f64>,
    pub oracle_wer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub step: u64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlankRow {
    pub step: u64,
    pub blank_fraction: f64,
    pub pl_length_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pairs: usize,
    pub correlation: Correlation,
}

pub struct Report {
    pub pout: Vec<PoutRow>,
    pub scatter: Vec<ScatterRow>,
    pub tau: Vec<TauRow>,
    pub blank: Vec<BlankRow>,
    pub correlation: CorrelationReport,
}

pub fn build(records: &[StepRecord]) -> Report {
    let unlabeled = || records.iter().filter(|r| r.branch == Branch::Unlabeled);
    Report {
        pout: unlabeled()
            .map(|r| PoutRow { step: r.step, batch_id: r.batch_id, p_out: r.p_out, pl_distance: r.pl_distance })
            .collect(),
        scatter: unlabeled()
            .map(|r| ScatterRow { step: r.step, pl_distance: r.pl_distance, oracle_wer: r.oracle_wer })
            .collect(),
        tau: records.iter().map(|r| TauRow { step: r.step, tau: r.tau }).collect(),
        blank: records
            .iter()
            .filter_map(|r| Some(BlankRow { step: r.step, blank_fraction: r.blank_fraction?, pl_length_ratio: r.pl_length_ratio }))
            .collect(),
        correlation: CorrelationReport { pairs: correlation_pairs(records).len(), correlation: oracle_correlation(records) },
    }
}

pub fn write(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_csv(&dir.join("pout.csv"), &report.pout)?;
    write_csv(&dir.join("scatter.csv"), &report.scatter)?;
    write_csv(&dir.join("tau.csv"), &report.tau)?;
    write_csv(&dir.join("blank.csv"), &report.blank)?;
    let path = dir.join("correlation.json");
    let mut text = serde_json::to_string_pretty(&report.correlation).expect("serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(CliError::io(&path))
}

/// Reports on each run directory into `out/<name>`, where `name` is the run
/// directory's path components joined with `_`. Failures are collected per
/// run and do not stop the others.
pub fn report_runs(runs: &[PathBuf], out: &Path) -> Vec<(PathBuf, Result<Report>)> {
    runs.iter()
        .map(|run| {
            let result = read_steps(&run.join(STEPS_FILE)).and_then(|records| {
                let report = build(&records);
                write(&report, &out.join(run_name(run)))?;
                Ok(report)
            });
            (run.clone(), result)
        })
        .collect()
}

fn run_name(run: &Path) -> String {
    let parts: Vec<String> = run
        .components()
        .filter_map(|c| match c {
            std::path::Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect();
    if parts.is_empty() {
        "run".into()
    } else {
        parts.join("_")
    }
}
