//! Multi-seed sweeps over a grid of config variants.
//!
//! Grid file (TOML):
//!
//! ```toml
//! version = 1
//! base = "reference.toml"   # optional, relative to the grid file
//! seeds = [1, 2, 3]         # optional, defaults to the base config's seeds
//!
//! [[cells]]
//! name = "supervised"
//! overrides = ["trainer.unlabeled_ratio=0"]
//! ```
//!
//! Each `(cell, seed)` run goes to `<out>/<cell>/seed-<seed>/`. `runs.csv`
//! has one row per run and `cells.csv` one aggregated row per cell.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cpl_core::data::{generate_corpus, Corpus, CorpusConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, CONFIG_VERSION};
use crate::error::{CliError, Result};
use crate::run::{self, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub name: String,
    #[serde(default)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub version: u32,
    #[serde(default)]
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    pub cells: Vec<GridCell>,
}

/// A grid resolved against its base config: one validated config per cell.
pub struct ResolvedGrid {
    pub cells: Vec<(String, ExperimentConfig)>,
    pub seeds: Vec<u64>,
}

impl Grid {
    pub fn load(path: &Path) -> Result<ResolvedGrid> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let grid: Grid = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = match &grid.base {
            Some(b) => ExperimentConfig::load(&path.parent().unwrap_or(Path::new(".")).join(b))?,
            None => ExperimentConfig::default(),
        };
        grid.resolve(&base)
    }

    pub fn resolve(&self, base: &ExperimentConfig) -> Result<ResolvedGrid> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!("unsupported grid version {}", self.version)));
        }
        if self.cells.is_empty() {
            return Err(CliError::Config("grid has no cells".into()));
        }
        let mut cells = Vec::new();
        for c in &self.cells {
            if c.name.is_empty() || c.name.contains(['/', '\\']) || c.name.starts_with('.') {
                return Err(CliError::Config(format!("invalid cell name `{}`", c.name)));
            }
            if cells.iter().any(|(n, _): &(String, _)| *n == c.name) {
                return Err(CliError::Config(format!("duplicate cell `{}`", c.name)));
            }
            let cfg = base.with_overrides(&c.overrides).map_err(|e| CliError::Config(format!("cell `{}`: {e}", c.name)))?;
            cells.push((c.name.clone(), cfg));
        }
        let seeds = self.seeds.clone().unwrap_or_else(|| base.seeds.clone());
        if seeds.is_empty() {
            return Err(CliError::Config("no seeds".into()));
        }
        Ok(ResolvedGrid { cells, seeds })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub cell: String,
    pub seed: u64,
    /// `ok`, `dv` or `error`.
    pub status: String,
    pub steps: Option<u64>,
    pub dev_ter: Option<f64>,
    pub dev_wer: Option<f64>,
    pub test_ter: Option<f64>,
    pub test_wer: Option<f64>,
    pub error: Option<String>,
}

impl RunRow {
    fn from_result(cell: &str, seed: u64, r: &Result<Summary>) -> Self {
        match r {
            Ok(s) => RunRow {
                cell: cell.into(),
                seed,
                status: if s.diverged { "dv" } else { "ok" }.into(),
                steps: Some(s.steps),
                dev_ter: Some(s.final_dev.ter),
                dev_wer: Some(s.final_dev.wer),
                test_ter: Some(s.final_test.ter),
                test_wer: Some(s.final_test.wer),
                error: None,
            },
            Err(e) => RunRow {
                cell: cell.into(),
                seed,
                status: "error".into(),
                steps: None,
                dev_ter: None,
                dev_wer: None,
                test_ter: None,
                test_wer: None,
                error: Some(e.to_string()),
            },
        }
    }
}

/// Aggregate over a cell. Means and sample standard deviations are taken
/// over runs that finished without divergence; diverged and failed runs are
/// counted instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub cell: String,
    pub runs: usize,
    pub dv: usize,
    pub failed: usize,
    pub dev_ter_mean: Option<f64>,
    pub dev_ter_std: Option<f64>,
    pub dev_wer_mean: Option<f64>,
    pub dev_wer_std: Option<f64>,
    pub test_ter_mean: Option<f64>,
    pub test_ter_std: Option<f64>,
    pub test_wer_mean: Option<f64>,
    pub test_wer_std: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    (Some(mean), Some(std))
}

pub fn aggregate(rows: &[RunRow]) -> Vec<CellRow> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_cell: BTreeMap<&str, Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        if !by_cell.contains_key(r.cell.as_str()) {
            order.push(&r.cell);
        }
        by_cell.entry(&r.cell).or_default().push(r);
    }
    order
        .into_iter()
        .map(|cell| {
            let rs = &by_cell[cell];
            let ok: Vec<&&RunRow> = rs.iter().filter(|r| r.status == "ok").collect();
            let col = |f: fn(&RunRow) -> Option<f64>| mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (dev_ter_mean, dev_ter_std) = col(|r| r.dev_ter);
            let (dev_wer_mean, dev_wer_std) = col(|r| r.dev_wer);
            let (test_ter_mean, test_ter_std) = col(|r| r.test_ter);
            let (test_wer_mean, test_wer_std) = col(|r| r.test_wer);
            CellRow {
                cell: cell.into(),
                runs: rs.len(),
                dv: rs.iter().filter(|r| r.status == "dv").count(),
                failed: rs.iter().filter(|r| r.status == "error").count(),
                dev_ter_mean,
                dev_ter_std,
                dev_wer_mean,
                dev_wer_std,
                test_ter_mean,
                test_ter_std,
                test_wer_mean,
                test_wer_std,
            }
        })
        .collect()
}

pub struct SweepOutput {
    pub runs: Vec<RunRow>,
    pub cells: Vec<CellRow>,
}

/// Runs every `(cell, seed)` pair, in parallel, into `out`. A failing run is
/// recorded in its row and does not stop the others.
pub fn run_sweep(grid: &ResolvedGrid, out: &Path) -> Result<SweepOutput> {
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    // Corpora are generated once per distinct corpus section.
    let mut corpora: Vec<(CorpusConfig, std::result::Result<Corpus, String>)> = Vec::new();
    for (_, cfg) in &grid.cells {
        if !corpora.iter().any(|(c, _)| *c == cfg.corpus) {
            corpora.push((cfg.corpus.clone(), generate_corpus(&cfg.corpus).map_err(|e| e.to_string())));
        }
    }
    let jobs: Vec<(&str, &ExperimentConfig, u64)> =
        grid.cells.iter().flat_map(|(name, cfg)| grid.seeds.iter().map(move |&s| (name.as_str(), cfg, s))).collect();
    let runs: Vec<RunRow> = jobs
        .par_iter()
        .map(|&(name, cfg, seed)| {
            let corpus = &corpora.iter().find(|(c, _)| *c == cfg.corpus).expect("corpus generated").1;
            let result = match corpus {
                Ok(corpus) => {
                    let dir = out.join(name).join(format!("seed-{seed}"));
                    run::train_to_dir(&cfg.with_seed(seed), corpus, &dir)
                }
                Err(e) => Err(CliError::Config(e.clone())),
            };
            RunRow::from_result(name, seed, &result)
        })
        .collect();
    let cells = aggregate(&runs);
    write_csv(&out.join("runs.csv"), &runs)?;
    write_csv(&out.join("cells.csv"), &cells)?;
    Ok(SweepOutput { runs, cells })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| CliError::format(path, e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cell: &str, status: &str, ter: f64) -> RunRow {
        RunRow {
            cell: cell.into(),
            seed: 0,
            status: status.into(),
            steps: Some(1),
            dev_ter: Some(ter),
            dev_wer: Some(ter),
            test_ter: Some(ter),
            test_wer: Some(ter),
            error: None,
        }
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[]), (None, None));
        assert_eq!(mean_std(&[2.0]), (Some(2.0), Some(0.0)));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, Some(2.5));
        assert!((s.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn aggregation_counts_statuses() {
        let rows = vec![
            row("b", "ok", 0.2),
            row("a", "dv", 0.9),
            row("b", "ok", 0.4),
            row("a", "ok", 0.1),
            RunRow { status: "error".into(), ..row("a", "error", 0.0) },
        ];
        let cells = aggregate(&rows);
        assert_eq!(cells.iter().map(|c| c.cell.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        assert_eq!((cells[0].runs, cells[0].dv, cells[0].failed), (2, 0, 0));
        assert!((cells[0].dev_ter_mean.unwrap() - 0.3).abs() < 1e-12);
        assert_eq!((cells[1].runs, cells[1].dv, cells[1].failed), (3, 1, 1));
        assert_eq!(cells[1].dev_ter_mean, Some(0.1));
    }

    #[test]
    fn grid_validation() {
        let base = ExperimentConfig::default();
        let grid = |cells: Vec<GridCell>| Grid { version: 1, base: None, seeds: None, cells };
        let cell = |n: &str, o: &[&str]| GridCell { name: n.into(), overrides: o.iter().map(|s| s.to_string()).collect() };
        let g = grid(vec![cell("a", &[]), cell("b", &["trainer.pout=constant:1"])]).resolve(&base).unwrap();
        assert_eq!(g.seeds, base.seeds);
        assert_eq!(g.cells.len(), 2);
        assert!(grid(vec![]).resolve(&base).is_err());
        assert!(grid(vec![cell("a", &[]), cell("a", &[])]).resolve(&base).is_err());
        assert!(grid(vec![cell("../x", &[])]).resolve(&base).is_err());
        assert!(grid(vec![cell("a", &["trainer.nope=1"])]).resolve(&base).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("x, y", "ok", 0.25), RunRow { error: Some("bad \"thing\"".into()), ..row("z", "error", 0.0) }];
        let path = dir.path().join("runs.csv");
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_csv::<RunRow>(&path).unwrap(), rows);
    }
}
