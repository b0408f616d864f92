//! Experiment configuration: one TOML file, strict schema, explicit version.
//!
//! Every field has a default, so an empty file (plus `version = 1`) describes
//! the reference experiment. Individual fields can be overridden with dotted
//! paths, e.g. `trainer.pout=constant:1` or `--trainer.pt_steps 0` on the
//! command line; a path that does not name an existing field is rejected.

use std::path::{Path, PathBuf};

use cpl_core::cache::{EvolutionMap, PoutStrategy, Writeback};
use cpl_core::data::{BatchMode, CorpusConfig};
use cpl_core::model::{AugmentConfig, EncoderConfig, LrSchedule};
use cpl_core::trainer::{DivergenceConfig, TauSchedule, TrainerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub trainer: TrainerConfig,
    pub lr: LrSchedule,
    /// Where `gen-data` writes and `train` reads the corpus.
    pub corpus_dir: PathBuf,
    /// Parent of run directories.
    pub output_dir: PathBuf,
    /// Seeds used by `sweep` when the grid does not list its own.
    pub seeds: Vec<u64>,
    /// Write a checkpoint every this many updates (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for ExperimentConfig {
    /// The reference experiment: 10% labeled synthetic corpus, no PT phase,
    /// dynamic `p_out` switching to 1, new-label write-back, temperature
    /// 1 -> 0.1, five unlabeled steps per labeled one.
    fn default() -> Self {
        let corpus = CorpusConfig { noise_sigma: 0.5, n_unlabeled: 360, ..CorpusConfig::default() };
        let encoder = EncoderConfig {
            feat_dim: corpus.feat_dim,
            vocab_size: corpus.vocab_tokens + 1,
            ..EncoderConfig::default()
        };
        let switch = 2000;
        ExperimentConfig {
            version: CONFIG_VERSION,
            corpus,
            encoder,
            augment: AugmentConfig::default(),
            trainer: TrainerConfig {
                pt_steps: 0,
                cache_capacity: 64,
                unlabeled_ratio: 5.0,
                pout: PoutStrategy::DynamicThenOne { map: EvolutionMap::Identity, switch_step: switch },
                writeback: Writeback::New,
                tau: TauSchedule::Linear { start: 1.0, end: 0.1, steps: switch },
                batch: BatchMode::Static(8),
                max_steps: 3000,
                eval_every: 100,
                divergence: DivergenceConfig::default(),
                ..TrainerConfig::default()
            },
            lr: LrSchedule { warmup_steps: 50, ..LrSchedule::default() },
            corpus_dir: PathBuf::from("corpus"),
            output_dir: PathBuf::from("runs"),
            seeds: vec![1, 2, 3],
            checkpoint_every: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        match value.get("version").and_then(|v| v.as_integer()) {
            Some(v) if v == CONFIG_VERSION as i64 => {}
            Some(v) => return Err(CliError::Config(format!("unsupported config version {v} (expected {CONFIG_VERSION})"))),
            None => return Err(CliError::Config("missing `version` field".into())),
        }
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `path=value` overrides. Values are parsed as TOML literals,
    /// falling back to plain strings (so `constant:1` needs no quotes).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not of the form path=value")))?;
            set_path(&mut value, path.trim(), parse_literal(raw.trim()))?;
        }
        Self::from_value(value)
    }

    /// Sets the model-initialization and training seeds.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.encoder.seed = seed;
        c.trainer.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.augment.validate()?;
        self.trainer.validate()?;
        self.lr.validate()?;
        let conflict = |m: String| Err(CliError::Config(m));
        if self.encoder.feat_dim != self.corpus.feat_dim {
            return conflict(format!(
                "encoder.feat_dim ({}) differs from corpus.feat_dim ({})",
                self.encoder.feat_dim, self.corpus.feat_dim
            ));
        }
        if self.encoder.vocab_size != self.corpus.vocab_tokens + 1 {
            return conflict(format!(
                "encoder.vocab_size ({}) must be corpus.vocab_tokens + 1 ({})",
                self.encoder.vocab_size,
                self.corpus.vocab_tokens + 1
            ));
        }
        if self.corpus.min_frames < self.encoder.conv_kernel {
            return conflict(format!(
                "corpus.min_frames ({}) is below encoder.conv_kernel ({})",
                self.corpus.min_frames, self.encoder.conv_kernel
            ));
        }
        if let BatchMode::MaxFrames(m) = self.trainer.batch {
            let (_, longest) = self.corpus.frame_bounds();
            if longest > m {
                return conflict(format!("trainer.batch max_frames {m} is below the longest possible utterance ({longest})"));
            }
        }
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not a table", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            // Optional fields serialize as absent; accept them if the schema
            // knows them (checked when the value is deserialized back).
            if !table.contains_key(*key) && !OPTIONAL_FIELDS.contains(&path) {
                return Err(CliError::Config(format!("unknown config field `{path}`")));
            }
            let value = coerce_like(table.get(*key), value);
            table.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = table.get_mut(*key).ok_or_else(|| CliError::Config(format!("unknown config field `{path}`")))?;
    }
    unreachable!("split yields at least one key")
}

/// Fields of `Option` type, which are absent from the serialized default.
const OPTIONAL_FIELDS: &[&str] = &["corpus.word_boundary", "corpus.unlabeled_shift"];

/// Integers given where the existing field is a float become floats.
fn coerce_like(existing: Option<&toml::Value>, value: toml::Value) -> toml::Value {
    match (existing, value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}
