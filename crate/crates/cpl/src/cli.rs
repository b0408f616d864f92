//! Command-line front end.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::corpus_io;
use crate::error::{exit, CliError, Result};
use crate::report;
use crate::run;
use crate::sweep::{self, Grid};

#[derive(Debug, Parser)]
#[command(name = "cpl", version, about = "Continuous pseudo-labeling experiments on synthetic sequence data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus described by the config.
    GenData(ConfigArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Run every cell of a grid over several seeds.
    Sweep(SweepArgs),
    /// Extract analysis series from run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML). Without it the reference config is used.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Field overrides as `--section.field value` or `--section.field=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sets the model-initialization and training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `<output_dir>/seed-<seed>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid file (TOML).
    pub grid: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds, overriding the grid's.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories containing `steps.jsonl`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Turns `--a.b v`, `--a.b=v` sequences into `a.b=v` overrides.
pub fn parse_overrides(args: &[String]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(CliError::Config(format!("unexpected argument `{a}`")));
        };
        if !flag.contains('.') {
            return Err(CliError::Config(format!("unknown flag `{a}`")));
        }
        if flag.contains('=') {
            out.push(flag.to_string());
        } else {
            let value = it.next().ok_or_else(|| CliError::Config(format!("flag `{a}` needs a value")))?;
            out.push(format!("{flag}={value}"));
        }
    }
    Ok(out)
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        base.with_overrides(&parse_overrides(&self.overrides)?)
    }
}

pub fn gen_data(args: &ConfigArgs) -> Result<i32> {
    let cfg = args.resolve()?;
    let corpus = cpl_core::data::generate_corpus(&cfg.corpus)?;
    corpus_io::write_corpus(&corpus, &cfg.corpus_dir)?;
    println!("wrote {} utterances to {}", corpus.utterances.len(), cfg.corpus_dir.display());
    Ok(exit::OK)
}

pub fn train(args: &TrainArgs) -> Result<i32> {
    let mut cfg = args.config.resolve()?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    let corpus = corpus_io::read_corpus(&cfg.corpus_dir)?;
    run::check_corpus(&cfg, &corpus)?;
    let dir = args.run_dir.clone().unwrap_or_else(|| cfg.output_dir.join(format!("seed-{}", cfg.trainer.seed)));
    let summary = run::train_to_dir(&cfg, &corpus, &dir)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(if summary.diverged { exit::DIVERGED } else { exit::OK })
}

pub fn sweep(args: &SweepArgs) -> Result<i32> {
    let mut grid = Grid::load(&args.grid)?;
    if let Some(seeds) = &args.seeds {
        if seeds.is_empty() {
            return Err(CliError::Config("no seeds".into()));
        }
        grid.seeds = seeds.clone();
    }
    let out = sweep::run_sweep(&grid, &args.out)?;
    for c in &out.cells {
        let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "-".into(),
        };
        println!(
            "{:<24} runs {} dv {} failed {}  dev TER {}  test TER {}",
            c.cell,
            c.runs,
            c.dv,
            c.failed,
            fmt(c.dev_ter_mean, c.dev_ter_std),
            fmt(c.test_ter_mean, c.test_ter_std)
        );
    }
    for r in out.runs.iter().filter(|r| r.error.is_some()) {
        eprintln!("{} seed {}: {}", r.cell, r.seed, r.error.as_deref().unwrap_or_default());
    }
    Ok(if out.runs.iter().any(|r| r.status == "error") { exit::PARTIAL } else { exit::OK })
}

pub fn report(args: &ReportArgs) -> Result<i32> {
    let mut code = exit::OK;
    for (run, result) in report::report_runs(&args.runs, &args.out) {
        match result {
            Ok(r) => println!("{}: {} pairs, correlation {:?}", run.display(), r.correlation.pairs, r.correlation.correlation),
            Err(e) => {
                eprintln!("{}: {e}", run.display());
                code = code.max(e.exit_code());
            }
        }
    }
    Ok(code)
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn override_flags() {
        assert_eq!(
            parse_overrides(&s(&["--trainer.pt_steps", "0", "--trainer.pout=constant:1"])).unwrap(),
            s(&["trainer.pt_steps=0", "trainer.pout=constant:1"])
        );
        assert_eq!(parse_overrides(&s(&["--corpus.noise_sigma", "-1"])).unwrap(), s(&["corpus.noise_sigma=-1"]));
        assert!(parse_overrides(&s(&["--bogus", "1"])).is_err());
        assert!(parse_overrides(&s(&["trainer.pt_steps=0"])).is_err());
        assert!(parse_overrides(&s(&["--trainer.pt_steps"])).is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
