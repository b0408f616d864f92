//! Single training runs, in memory or into a run directory.
//!
//! A run directory holds `config.toml` (the effective config), `steps.jsonl`,
//! `checkpoints/step-NNNNNNNN.ckpt` at the configured interval,
//! `final.ckpt` and `summary.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cpl_core::data::{Corpus, Split};
use cpl_core::model::ModelState;
use cpl_core::trainer::{evaluate, EvalResult, RecordSink, RunStatus, StepRecord, Trainer, TrainingData};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::steplog::StepLogWriter;

pub const SUMMARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub format_version: u32,
    pub seed: u64,
    pub status: RunStatus,
    pub diverged: bool,
    /// Optimizer updates performed.
    pub steps: u64,
    pub final_dev: EvalResult,
    pub final_test: EvalResult,
    pub wall_time_s: f64,
}

impl Summary {
    /// Everything except the wall time, which is the only field that may
    /// differ between reruns.
    pub fn same_outcome(&self, other: &Summary) -> bool {
        Summary { wall_time_s: 0.0, ..self.clone() } == Summary { wall_time_s: 0.0, ..other.clone() }
    }
}

pub struct RunResult {
    pub summary: Summary,
    pub model: ModelState,
}

/// Rejects a corpus that was not generated by the config's corpus section.
pub fn check_corpus(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<()> {
    if corpus.config != cfg.corpus {
        return Err(CliError::Config(
            "the corpus on disk was generated with a different [corpus] section; rerun gen-data".into(),
        ));
    }
    Ok(())
}

/// Trains with `cfg` (its seeds are taken as set) and evaluates the final model.
pub fn train(cfg: &ExperimentConfig, corpus: &Corpus, sink: &mut dyn RecordSink) -> Result<RunResult> {
    cfg.validate()?;
    check_corpus(cfg, corpus)?;
    let started = Instant::now();
    let model = ModelState::init(cfg.encoder.clone())?;
    let data = TrainingData {
        labeled: corpus.labeled_view(Split::Labeled),
        unlabeled: corpus.unlabeled_view(),
        dev: corpus.labeled_view(Split::Dev),
    };
    let oracle = corpus.oracle();
    let boundary = cfg.corpus.word_boundary;
    let mut trainer =
        Trainer::new(model, cfg.trainer.clone(), cfg.lr.clone(), cfg.augment.clone(), data, boundary, Some(&oracle))?;
    let status = trainer.run(sink)?;
    let model = trainer.into_model();
    let final_dev = evaluate(&model, &corpus.labeled_view(Split::Dev), boundary)?;
    let final_test = evaluate(&model, &corpus.labeled_view(Split::Test), boundary)?;
    let summary = Summary {
        format_version: SUMMARY_VERSION,
        seed: cfg.trainer.seed,
        diverged: status.is_diverged(),
        status,
        steps: model.step(),
        final_dev,
        final_test,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(RunResult { summary, model })
}

struct DirSink {
    log: StepLogWriter,
    checkpoints: PathBuf,
    every: u64,
    error: Option<CliError>,
}

impl RecordSink for DirSink {
    fn record(&mut self, record: &StepRecord) {
        self.log.write(record);
    }

    fn after_step(&mut self, model: &ModelState) {
        if self.every > 0 && model.step() % self.every == 0 && self.error.is_none() {
            let path = self.checkpoints.join(format!("step-{:08}.ckpt", model.step()));
            if let Err(e) = checkpoint::save(model, &path) {
                self.error = Some(e);
            }
        }
    }
}

pub const CONFIG_FILE: &str = "config.toml";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Trains into `dir`, which is created (or reused, overwriting its files).
pub fn train_to_dir(cfg: &ExperimentConfig, corpus: &Corpus, dir: &Path) -> Result<Summary> {
    cfg.validate()?;
    check_corpus(cfg, corpus)?;
    let checkpoints = dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoints).map_err(CliError::io(&checkpoints))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(CliError::io(&cfg_path))?;

    let log = StepLogWriter::create(&dir.join(STEPS_FILE))?;
    let mut sink = DirSink { log, checkpoints, every: cfg.checkpoint_every, error: None };
    let result = train(cfg, corpus, &mut sink)?;
    sink.log.finish()?;
    if let Some(e) = sink.error {
        return Err(e);
    }
    checkpoint::save(&result.model, &dir.join(FINAL_CHECKPOINT))?;
    write_summary(&result.summary, &dir.join(SUMMARY_FILE))?;
    Ok(result.summary)
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io(path))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
}
