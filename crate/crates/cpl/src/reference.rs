//! The reference experiment and the three-way comparison run on it.

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::sweep::{Grid, ResolvedGrid};

/// Grid with the supervised, hard-label baseline and proposed cells.
pub const ACCEPTANCE_GRID: &str = include_str!("../configs/acceptance.toml");

pub const SUPERVISED: &str = "supervised";
pub const BASELINE: &str = "hard_constant_old";
pub const PROPOSED: &str = "proposed";

/// Dev TER that supervised-only training stays under on every seed of the
/// reference corpus. Frozen from pilot runs.
pub const SUPERVISED_TER_CEILING: f64 = 0.28;

pub fn proposed_config() -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::default();
    cfg.validate()?;
    Ok(cfg)
}

pub fn acceptance_grid() -> Result<ResolvedGrid> {
    let grid: Grid = toml::from_str(ACCEPTANCE_GRID).map_err(|e| crate::CliError::Config(e.to_string()))?;
    grid.resolve(&proposed_config()?)
}
