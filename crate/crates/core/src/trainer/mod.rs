//! Continuous pseudo-labeling: an optional supervised warm-up (PT), a phase
//! that fills the cache while training on labeled data, and the continuous
//! phase that interleaves labeled steps with steps on cached pseudo-labels.
//!
//! Every optimizer update produces exactly one [`StepRecord`]. Hidden
//! transcripts of unlabeled data reach the trainer only through an optional
//! [`Oracle`], and only the `oracle_*` record fields read it.

mod analysis;
mod schedule;

pub use analysis::{
    correlation_pairs, detect_divergence, head_tail_means, oracle_correlation, pearson, Correlation,
    Divergence, DivergenceConfig, MIN_CORRELATION_PAIRS,
};
pub use schedule::{temperature, TauSchedule};

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cache::{Cache, CacheEntry, Distance, PoutStrategy, Writeback};
use crate::ctc::{collapse, ctc_loss_grad, greedy_alignment, greedy_decode, sample_alignment};
use crate::data::{BatchMode, Batcher, LabeledUtt, Oracle, UnlabeledUtt};
use crate::matrix::Matrix;
use crate::metrics::{self, Transcript};
use crate::model::{self, adagrad_step, augment, AugmentConfig, LrSchedule, Mode, ModelState};
use crate::rng::{self, Rng, Stream};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Supervised-only steps before any pseudo-label is generated.
    pub pt_steps: u64,
    /// Cache capacity in batches.
    pub cache_capacity: usize,
    /// Unlabeled-to-labeled step proportion: a continuous step is unlabeled
    /// with probability `ratio / (1 + ratio)`. Zero gives supervised training.
    pub unlabeled_ratio: f64,
    pub pout: PoutStrategy,
    pub writeback: Writeback,
    pub tau: TauSchedule,
    /// How pseudo-label evolution is measured.
    pub distance: Distance,
    pub batch: BatchMode,
    /// Total optimizer updates across all phases.
    pub max_steps: u64,
    pub eval_every: u64,
    /// Dropout during PT (and for supervised-only runs).
    pub dropout_high: f64,
    /// Dropout after PT; runs without PT start here.
    pub dropout_low: f64,
    pub divergence: DivergenceConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            pt_steps: 0,
            cache_capacity: 32,
            unlabeled_ratio: 5.0,
            pout: PoutStrategy::DynamicThenOne { map: crate::cache::EvolutionMap::Identity, switch_step: 2000 },
            writeback: Writeback::New,
            tau: TauSchedule::Linear { start: 1.0, end: 0.1, steps: 2000 },
            distance: Distance::Token,
            batch: BatchMode::Static(8),
            max_steps: 3000,
            eval_every: 100,
            dropout_high: 0.3,
            dropout_low: 0.1,
            divergence: DivergenceConfig::default(),
            seed: 1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.unlabeled_ratio >= 0.0) || !self.unlabeled_ratio.is_finite() {
            return Err(Error::invalid("unlabeled_ratio must be finite and >= 0"));
        }
        if self.cache_capacity == 0 {
            return Err(Error::invalid("cache_capacity must be >= 1"));
        }
        if self.max_steps <= self.pt_steps + self.cache_capacity as u64 {
            return Err(Error::invalid(format!(
                "max_steps ({}) must exceed pt_steps + cache_capacity ({})",
                self.max_steps,
                self.pt_steps + self.cache_capacity as u64
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        for r in [self.dropout_high, self.dropout_low] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid("dropout rates must be in [0, 1]"));
            }
        }
        self.pout.validate()?;
        self.tau.validate()
    }

    pub fn labeled_probability(&self) -> f64 {
        1.0 / (1.0 + self.unlabeled_ratio)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    #[default]
    Pt,
    Fill,
    Continuous,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    #[default]
    Labeled,
    Unlabeled,
}

/// One optimizer update. Field names are part of the log format.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Model step before the update (`k`).
    pub step: u64,
    pub phase: Phase,
    pub branch: Branch,
    /// Mean CTC loss over the utterances that could be aligned.
    pub loss: Option<f64>,
    /// Utterances skipped because their target needs more frames than exist.
    pub skipped: usize,
    pub tau: f64,
    pub lr: f64,
    /// Cache batch trained on (unlabeled) or inserted (fill).
    pub batch_id: Option<u64>,
    /// Steps since the trained-on pseudo-labels were generated.
    pub pl_age: Option<u64>,
    /// Unclipped distance between the cached and regenerated pseudo-labels.
    pub pl_distance: Option<f64>,
    pub p_out: Option<f64>,
    pub evicted: Option<bool>,
    /// Blank share of the frames of the freshly generated alignments.
    pub blank_fraction: Option<f64>,
    /// Fresh pseudo-label tokens per output frame.
    pub pl_length_ratio: Option<f64>,
    /// Oracle error of the freshly generated pseudo-labels against the hidden
    /// transcripts. Analysis only.
    pub oracle_wer: Option<f64>,
    pub oracle_ter: Option<f64>,
    /// Dev-set error after this update, on evaluation steps.
    pub dev_ter: Option<f64>,
}

/// Receives records as they are produced.
pub trait RecordSink {
    fn record(&mut self, record: &StepRecord);

    /// Called after each completed update with the updated model.
    fn after_step(&mut self, _model: &ModelState) {}
}

impl RecordSink for Vec<StepRecord> {
    fn record(&mut self, record: &StepRecord) {
        self.push(record.clone());
    }
}

/// Discards records.
pub struct NullSink;

impl RecordSink for NullSink {
    fn record(&mut self, _: &StepRecord) {}
}

impl<F: FnMut(&StepRecord)> RecordSink for F {
    fn record(&mut self, record: &StepRecord) {
        self(record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status")]
pub enum RunStatus {
    Ok,
    Dv(Divergence),
}

impl RunStatus {
    pub fn is_diverged(&self) -> bool {
        matches!(self, RunStatus::Dv(_))
    }
}

/// Data handed to the trainer. Unlabeled utterances carry features only.
#[derive(Debug, Clone)]
pub struct TrainingData<'a> {
    pub labeled: Vec<LabeledUtt<'a>>,
    pub unlabeled: Vec<UnlabeledUtt<'a>>,
    pub dev: Vec<LabeledUtt<'a>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ter: f64,
    pub wer: f64,
}

/// Greedy decoding error rates over a labeled split.
pub fn evaluate(model: &ModelState, utts: &[LabeledUtt<'_>], word_boundary: Option<TokenId>) -> Result<EvalResult> {
    let blank = model.blank();
    let mut refs = Vec::with_capacity(utts.len());
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        let logits = model::infer(model, u.features)?;
        hyps.push(greedy_decode(&logits, blank));
        refs.push(u.transcript.clone());
    }
    let ter = metrics::batch_ter(&refs, &hyps)?;
    let wer = match word_boundary {
        Some(b) => metrics::batch_wer(&refs, &hyps, b)?,
        None => {
            let stats: metrics::EditStats = refs.iter().zip(&hyps).map(|(r, h)| metrics::levenshtein(&[r], &[h])).sum();
            stats.rate()
        }
    };
    Ok(EvalResult { ter, wer })
}

/// Pseudo-labels for a batch plus the frame statistics of their alignments.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub pls: Vec<Transcript>,
    pub blank_frames: usize,
    pub label_tokens: usize,
    pub frames: usize,
}

impl PseudoLabels {
    pub fn blank_fraction(&self) -> f64 {
        self.blank_frames as f64 / self.frames.max(1) as f64
    }

    pub fn length_ratio(&self) -> f64 {
        self.label_tokens as f64 / self.frames.max(1) as f64
    }
}

/// Inference-mode pseudo-labels. At `tau == 0` this is greedy decoding;
/// otherwise each utterance samples its alignment from its own stream,
/// derived from `(seed, step, utterance id)`, so results do not depend on
/// the order (or thread) in which utterances are processed.
pub fn generate_pls(model: &ModelState, utts: &[UnlabeledUtt<'_>], tau: f64, step: u64, seed: u64) -> Result<PseudoLabels> {
    let blank = model.blank();
    let mut out = PseudoLabels { pls: Vec::with_capacity(utts.len()), blank_frames: 0, label_tokens: 0, frames: 0 };
    for u in utts {
        let logits = model::infer(model, u.features)?;
        let alignment = if tau == 0.0 {
            greedy_alignment(&logits)
        } else {
            let mut r = rng::stream(seed, Stream::PlSampling, rng::pl_sub_index(step, u.id));
            sample_alignment(&logits, tau, &mut r)?
        };
        let pl = collapse(&alignment, blank);
        out.blank_frames += alignment.blank_count(blank);
        out.frames += alignment.0.len();
        out.label_tokens += pl.len();
        out.pls.push(pl);
    }
    Ok(out)
}

/// Whether a continuous step takes the unlabeled branch.
pub fn choose_unlabeled(rng: &mut Rng, labeled_probability: f64) -> bool {
    rng.random::<f64>() >= labeled_probability
}

enum Outcome {
    Continue,
    Halt,
}

pub struct Trainer<'a> {
    model: ModelState,
    config: TrainerConfig,
    lr: LrSchedule,
    augment: AugmentConfig,
    data: TrainingData<'a>,
    word_boundary: Option<TokenId>,
    oracle: Option<&'a dyn Oracle>,
    cache: Cache,
    labeled_batches: Batcher,
    unlabeled_batches: Batcher,
    dropout_rng: Rng,
    augment_rng: Rng,
    branch_rng: Rng,
    next_batch_id: u64,
    /// Records back to the first of the last `window` unlabeled ones.
    recent: VecDeque<StepRecord>,
    status: RunStatus,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: ModelState,
        config: TrainerConfig,
        lr: LrSchedule,
        augment: AugmentConfig,
        data: TrainingData<'a>,
        word_boundary: Option<TokenId>,
        oracle: Option<&'a dyn Oracle>,
    ) -> Result<Self> {
        config.validate()?;
        lr.validate()?;
        augment.validate()?;
        if data.labeled.is_empty() || data.unlabeled.is_empty() || data.dev.is_empty() {
            return Err(Error::invalid("labeled, unlabeled and dev sets must be non-empty"));
        }
        if !is_sorted_by_id(&data.unlabeled) {
            return Err(Error::invalid("unlabeled utterances must be ordered by id"));
        }
        let seed = config.seed;
        let labeled_batches = Batcher::new(
            data.labeled.iter().map(|u| u.features.rows()).collect(),
            config.batch,
            rng::stream(seed, Stream::LabeledBatches, 0),
        )?;
        let unlabeled_batches = Batcher::new(
            data.unlabeled.iter().map(|u| u.features.rows()).collect(),
            config.batch,
            rng::stream(seed, Stream::UnlabeledBatches, 0),
        )?;
        let cache = Cache::new(config.cache_capacity, rng::stream(seed, Stream::Cache, 0))?;
        let mut model = model;
        model.set_dropout(if config.pt_steps > 0 { config.dropout_high } else { config.dropout_low })?;
        Ok(Trainer {
            model,
            lr,
            augment,
            data,
            word_boundary,
            oracle,
            cache,
            labeled_batches,
            unlabeled_batches,
            dropout_rng: rng::stream(seed, Stream::Dropout, 0),
            augment_rng: rng::stream(seed, Stream::Augment, 0),
            branch_rng: rng::stream(seed, Stream::Branch, 0),
            next_batch_id: 0,
            recent: VecDeque::new(),
            status: RunStatus::Ok,
            config,
        })
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn into_model(self) -> ModelState {
        self.model
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn status(&self) -> &RunStatus {
        &self.status
    }

    fn tau(&self) -> f64 {
        temperature(self.model.step(), &self.config.tau)
    }

    /// One optimizer update on `(features, target)` pairs, with augmentation
    /// and dropout. Targets that cannot be aligned are skipped.
    fn train_on(&mut self, batch: &[(&Matrix, &Transcript)], record: &mut StepRecord) -> Result<()> {
        let k = self.model.step();
        let mut grad = vec![0.0; self.model.params().len()];
        let mut losses = Vec::with_capacity(batch.len());
        let mut pending = Vec::with_capacity(batch.len());
        for &(features, target) in batch {
            let x = augment(features, &self.augment, k, &mut self.augment_rng);
            let (logits, tape) = model::forward(&self.model, &x, Mode::Train, &mut self.dropout_rng)?;
            let out = ctc_loss_grad(&logits, target)?;
            if out.feasible {
                losses.push(out.loss);
                pending.push((tape, out.grad));
            } else {
                record.skipped += 1;
            }
        }
        let n = pending.len().max(1) as f64;
        for (tape, g) in &pending {
            let pg = model::backward(&self.model, tape, g)?;
            for (a, b) in grad.iter_mut().zip(pg) {
                *a += b / n;
            }
        }
        record.loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        record.lr = adagrad_step(&mut self.model, &grad, &self.lr)?;
        Ok(())
    }

    fn labeled_step(&mut self, record: &mut StepRecord) -> Result<()> {
        let idx = self.labeled_batches.next_batch();
        let data = &self.data.labeled;
        let batch: Vec<(&Matrix, &Transcript)> = idx.iter().map(|&i| (data[i].features, data[i].transcript)).collect();
        self.train_on(&batch, record)
    }

    fn fresh_unlabeled(&mut self) -> Vec<UnlabeledUtt<'a>> {
        self.unlabeled_batches.next_batch().iter().map(|&i| self.data.unlabeled[i]).collect()
    }

    fn attach_pl_stats(&self, record: &mut StepRecord, utts: &[UnlabeledUtt<'_>], pls: &PseudoLabels) {
        record.blank_fraction = Some(pls.blank_fraction());
        record.pl_length_ratio = Some(pls.length_ratio());
        if let Some(oracle) = self.oracle {
            let golden: Option<Vec<Transcript>> = utts.iter().map(|u| oracle.golden(u.id).cloned()).collect();
            if let Some(golden) = golden {
                record.oracle_ter = metrics::batch_ter(&golden, &pls.pls).ok();
                record.oracle_wer = match self.word_boundary {
                    Some(b) => metrics::batch_wer(&golden, &pls.pls, b).ok(),
                    None => record.oracle_ter,
                };
            }
        }
    }

    /// Bookkeeping after every update: dev evaluation, logging, divergence.
    fn finish(&mut self, mut record: StepRecord, sink: &mut dyn RecordSink) -> Result<Outcome> {
        if self.model.step() % self.config.eval_every == 0 {
            record.dev_ter = Some(evaluate(&self.model, &self.data.dev, self.word_boundary)?.ter);
        }
        sink.record(&record);
        sink.after_step(&self.model);
        self.recent.push_back(record);
        let window = self.config.divergence.window;
        let unlabeled = |r: &StepRecord| r.branch == Branch::Unlabeled && r.blank_fraction.is_some();
        while self.recent.iter().filter(|r| unlabeled(r)).count() > window {
            self.recent.pop_front();
        }
        if let Some(dv) = detect_divergence(self.recent.make_contiguous(), &self.config.divergence) {
            self.halt(dv);
            return Ok(Outcome::Halt);
        }
        Ok(Outcome::Continue)
    }

    fn halt(&mut self, dv: Divergence) {
        self.status = RunStatus::Dv(dv);
    }

    /// Runs `f` as one update. Non-finite logits or gradients halt the run: the
    /// partial record is logged and `true` returned.
    fn guarded(
        &mut self,
        record: &mut StepRecord,
        sink: &mut dyn RecordSink,
        f: impl FnOnce(&mut Self, &mut StepRecord) -> Result<()>,
    ) -> Result<bool> {
        match f(self, record) {
            Ok(()) => Ok(false),
            Err(Error::NonFinite { step }) => {
                sink.record(record);
                self.halt(Divergence { step, reason: format!("non-finite values at step {step}") });
                Ok(true)
            }
            Err(e) => Err(e),
        }
    }

    /// Supervised-only steps, then the dropout decrease.
    pub fn run_pt_phase(&mut self, sink: &mut dyn RecordSink) -> Result<RunStatus> {
        for _ in 0..self.config.pt_steps {
            if let Outcome::Halt = self.supervised_update(Phase::Pt, sink)? {
                return Ok(self.status.clone());
            }
        }
        self.model.set_dropout(self.config.dropout_low)?;
        Ok(self.status.clone())
    }

    fn supervised_update(&mut self, phase: Phase, sink: &mut dyn RecordSink) -> Result<Outcome> {
        let mut record = StepRecord { step: self.model.step(), phase, branch: Branch::Labeled, tau: self.tau(), ..Default::default() };
        if self.guarded(&mut record, sink, |t, r| t.labeled_step(r))? {
            return Ok(Outcome::Halt);
        }
        self.finish(record, sink)
    }

    /// `cache_capacity` iterations of: pseudo-label a fresh unlabeled batch,
    /// cache it, take one labeled step.
    pub fn run_fill_phase(&mut self, sink: &mut dyn RecordSink) -> Result<RunStatus> {
        if !self.cache.is_empty() {
            return Err(Error::Cache("fill phase needs an empty cache".into()));
        }
        for _ in 0..self.config.cache_capacity {
            let k = self.model.step();
            let tau = self.tau();
            let mut record = StepRecord { step: k, phase: Phase::Fill, branch: Branch::Labeled, tau, ..Default::default() };
            let fill = |t: &mut Self, r: &mut StepRecord| {
                let utts = t.fresh_unlabeled();
                let pls = generate_pls(&t.model, &utts, tau, k, t.config.seed)?;
                t.attach_pl_stats(r, &utts, &pls);
                let id = t.take_batch_id();
                r.batch_id = Some(id);
                t.cache.insert(CacheEntry::new(id, utts.iter().map(|u| u.id).collect(), pls.pls, k)?, k)?;
                t.labeled_step(r)
            };
            if self.guarded(&mut record, sink, fill)? {
                return Ok(self.status.clone());
            }
            if let Outcome::Halt = self.finish(record, sink)? {
                return Ok(self.status.clone());
            }
        }
        Ok(self.status.clone())
    }

    fn take_batch_id(&mut self) -> u64 {
        let id = self.next_batch_id;
        self.next_batch_id += 1;
        id
    }

    /// Continuous pseudo-labeling until `max_steps` or divergence.
    pub fn run_continuous_phase(&mut self, sink: &mut dyn RecordSink) -> Result<RunStatus> {
        if !self.cache.is_full() && self.config.unlabeled_ratio > 0.0 {
            return Err(Error::Cache("continuous phase needs a full cache".into()));
        }
        let p_labeled = self.config.labeled_probability();
        while self.model.step() < self.config.max_steps {
            let outcome = if choose_unlabeled(&mut self.branch_rng, p_labeled) {
                self.unlabeled_update(sink)?
            } else {
                self.supervised_update(Phase::Continuous, sink)?
            };
            if let Outcome::Halt = outcome {
                break;
            }
        }
        Ok(self.status.clone())
    }

    fn unlabeled_update(&mut self, sink: &mut dyn RecordSink) -> Result<Outcome> {
        let k = self.model.step();
        let tau = self.tau();
        let mut record = StepRecord { step: k, phase: Phase::Continuous, branch: Branch::Unlabeled, tau, ..Default::default() };

        let entry = self.cache.draw()?;
        record.batch_id = Some(entry.batch_id);
        record.pl_age = Some(k - entry.created_step);
        let utts: Vec<UnlabeledUtt<'a>> = entry
            .utterances
            .iter()
            .map(|id| self.unlabeled_by_id(*id))
            .collect::<Result<_>>()?;
        {
            let batch: Vec<(&Matrix, &Transcript)> = utts.iter().map(|u| u.features).zip(&entry.pls).collect();
            if self.guarded(&mut record, sink, |t, r| t.train_on(&batch, r))? {
                return Ok(Outcome::Halt);
            }
        }

        // Labels from the model as it is now, for both the evolution signal
        // and (possibly) the write-back.
        let now = self.model.step();
        let fresh = generate_pls(&self.model, &utts, tau, now, self.config.seed)?;
        let distance = self.config.distance.between(&entry.pls, &fresh.pls)?;
        let p_out = self.config.pout.probability(k, distance);
        record.pl_distance = Some(distance);
        record.p_out = Some(p_out);
        self.attach_pl_stats(&mut record, &utts, &fresh);

        let evict = self.cache.coin(p_out);
        record.evicted = Some(evict);
        if evict {
            let new_utts = self.fresh_unlabeled();
            let new_pls = generate_pls(&self.model, &new_utts, tau, now, self.config.seed)?;
            let id = self.take_batch_id();
            self.cache.replace(CacheEntry::new(id, new_utts.iter().map(|u| u.id).collect(), new_pls.pls, now)?, now)?;
        } else {
            self.cache.readmit(entry, self.config.writeback, fresh.pls, now)?;
        }
        self.finish(record, sink)
    }

    fn unlabeled_by_id(&self, id: u64) -> Result<UnlabeledUtt<'a>> {
        // Unlabeled views are built in id order.
        let pos = self
            .data
            .unlabeled
            .binary_search_by_key(&id, |u| u.id)
            .map_err(|_| Error::invalid(format!("unknown unlabeled utterance {id}")))?;
        Ok(self.data.unlabeled[pos])
    }

    /// All phases in order.
    pub fn run(&mut self, sink: &mut dyn RecordSink) -> Result<RunStatus> {
        if self.run_pt_phase(sink)?.is_diverged() {
            return Ok(self.status.clone());
        }
        if self.run_fill_phase(sink)?.is_diverged() {
            return Ok(self.status.clone());
        }
        self.run_continuous_phase(sink)
    }

    /// Plain supervised training for `steps` updates at `dropout_high`.
    pub fn run_supervised(&mut self, steps: u64, sink: &mut dyn RecordSink) -> Result<RunStatus> {
        self.model.set_dropout(self.config.dropout_high)?;
        for _ in 0..steps {
            if let Outcome::Halt = self.supervised_update(Phase::Pt, sink)? {
                break;
            }
        }
        Ok(self.status.clone())
    }
}

fn is_sorted_by_id(utts: &[UnlabeledUtt<'_>]) -> bool {
    utts.windows(2).all(|w| w[0].id < w[1].id)
}

#[cfg(test)]
mod tests;
