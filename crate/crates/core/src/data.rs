//! Synthetic, exactly CTC-realizable corpus.
//!
//! Every token, plus one extra "pause" symbol, gets a fixed unit prototype
//! vector. An utterance samples a transcript uniformly, then renders each
//! token as its prototype repeated for a uniformly drawn number of frames.
//! Two equal neighbouring tokens are separated by a pause segment (labelled
//! blank in the frame alignment), so collapsing the frame labels always
//! gives back the transcript. Gaussian noise is added to every frame.
//!
//! Golden transcripts of the unlabeled split stay inside [`Corpus`]; the
//! trainer only ever sees [`UnlabeledUtt`], which carries features alone,
//! while analysis code reads labels through the [`Oracle`] trait.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::collapse;
use crate::ctc::Alignment;
use crate::matrix::Matrix;
use crate::metrics::Transcript;
use crate::rng::{self, Rng, Stream};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Labeled, Split::Unlabeled, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Different noise / duration settings for the unlabeled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub noise_sigma: f64,
    pub duration_min: usize,
    pub duration_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Number of real tokens; the model adds one blank class on top.
    pub vocab_tokens: usize,
    pub feat_dim: usize,
    pub prototype_seed: u64,
    /// Upper bound on the dot product between any two prototypes.
    pub max_prototype_dot: f64,
    /// Frames per rendered token (and per pause), inclusive range.
    pub duration_min: usize,
    pub duration_max: usize,
    pub noise_sigma: f64,
    pub transcript_min: usize,
    pub transcript_max: usize,
    /// Shortest acceptable utterance in frames (the encoder's kernel).
    pub min_frames: usize,
    /// Token that separates words for WER; `None` treats a transcript as one word.
    pub word_boundary: Option<TokenId>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub corpus_seed: u64,
    pub unlabeled_shift: Option<DomainShift>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_tokens: 8,
            feat_dim: 16,
            prototype_seed: 11,
            max_prototype_dot: 0.3,
            duration_min: 4,
            duration_max: 8,
            noise_sigma: 0.3,
            transcript_min: 3,
            transcript_max: 10,
            min_frames: 7,
            word_boundary: Some(0),
            n_labeled: 40,
            n_unlabeled: 400,
            n_dev: 100,
            n_test: 100,
            corpus_seed: 1,
            unlabeled_shift: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m));
        if self.vocab_tokens < 1 || self.feat_dim < 1 {
            return bad("vocab_tokens and feat_dim must be >= 1");
        }
        if self.duration_min < 1 || self.duration_min > self.duration_max {
            return bad("duration range must satisfy 1 <= duration_min <= duration_max");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("noise_sigma must be finite and >= 0");
        }
        if self.transcript_min < 1 || self.transcript_min > self.transcript_max {
            return bad("transcript range must satisfy 1 <= transcript_min <= transcript_max");
        }
        if self.transcript_min * self.duration_min < self.min_frames {
            return Err(Error::invalid(format!(
                "shortest utterance ({} tokens x {} frames) is below min_frames {}",
                self.transcript_min, self.duration_min, self.min_frames
            )));
        }
        if self.n_labeled == 0 || self.n_unlabeled == 0 || self.n_dev == 0 || self.n_test == 0 {
            return bad("every split needs at least one utterance");
        }
        if let Some(b) = self.word_boundary {
            if b as usize >= self.vocab_tokens {
                return bad("word_boundary must be a token id below vocab_tokens");
            }
        }
        if !(-1.0..1.0).contains(&self.max_prototype_dot) {
            return bad("max_prototype_dot must be in [-1, 1)");
        }
        if let Some(s) = &self.unlabeled_shift {
            if s.duration_min < 1 || s.duration_min > s.duration_max || !(s.noise_sigma >= 0.0) {
                return bad("invalid unlabeled_shift");
            }
            if self.transcript_min * s.duration_min < self.min_frames {
                return bad("unlabeled_shift durations make utterances shorter than min_frames");
            }
        }
        Ok(())
    }

    /// Inclusive range of utterance lengths in frames.
    pub fn frame_bounds(&self) -> (usize, usize) {
        let d_max = self.unlabeled_shift.as_ref().map_or(self.duration_max, |s| s.duration_max.max(self.duration_max));
        let d_min = self.unlabeled_shift.as_ref().map_or(self.duration_min, |s| s.duration_min.min(self.duration_min));
        // Worst case: a pause between every pair of tokens.
        (self.transcript_min * d_min, (2 * self.transcript_max - 1) * d_max)
    }

    fn split_of(&self, id: u64) -> Split {
        let id = id as usize;
        if id < self.n_labeled {
            Split::Labeled
        } else if id < self.n_labeled + self.n_unlabeled {
            Split::Unlabeled
        } else if id < self.n_labeled + self.n_unlabeled + self.n_dev {
            Split::Dev
        } else {
            Split::Test
        }
    }

    pub fn total(&self) -> usize {
        self.n_labeled + self.n_unlabeled + self.n_dev + self.n_test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: u64,
    pub split: Split,
    pub features: Matrix,
    pub golden: Transcript,
    /// Generating label of every input frame; pause frames carry `blank`.
    pub frame_labels: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    /// `vocab_tokens` token prototypes followed by the pause prototype.
    pub prototypes: Vec<Vec<f64>>,
    pub utterances: Vec<Utterance>,
}

/// Unit prototypes whose pairwise dot products stay below the bound; a vector
/// that violates it is redrawn.
pub fn draw_prototypes(cfg: &CorpusConfig) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng::stream(cfg.prototype_seed, Stream::Prototypes, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let count = cfg.vocab_tokens + 1;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid(format!(
                "could not place {count} prototypes in {} dims with dot < {}",
                cfg.feat_dim, cfg.max_prototype_dot
            )));
        }
        let mut v: Vec<f64> = (0..cfg.feat_dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        if out.iter().all(|p| dot(p, &v) < cfg.max_prototype_dot) {
            out.push(v);
        }
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let prototypes = draw_prototypes(cfg)?;
    let blank = cfg.vocab_tokens as TokenId;
    let utterances = (0..cfg.total() as u64)
        .map(|id| render(cfg, &prototypes, id, blank))
        .collect();
    Ok(Corpus { config: cfg.clone(), prototypes, utterances })
}

fn render(cfg: &CorpusConfig, prototypes: &[Vec<f64>], id: u64, blank: TokenId) -> Utterance {
    let split = cfg.split_of(id);
    let (sigma, d_min, d_max) = match (&cfg.unlabeled_shift, split) {
        (Some(s), Split::Unlabeled) => (s.noise_sigma, s.duration_min, s.duration_max),
        _ => (cfg.noise_sigma, cfg.duration_min, cfg.duration_max),
    };
    let mut rng = rng::stream(cfg.corpus_seed, Stream::Utterance, id);
    let len = rng.random_range(cfg.transcript_min..=cfg.transcript_max);
    let golden: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..cfg.vocab_tokens as TokenId)).collect();

    let mut frame_labels = Vec::new();
    let mut prev = None;
    for &tok in &golden {
        if prev == Some(tok) {
            let d = rng.random_range(d_min..=d_max);
            frame_labels.extend(core::iter::repeat(blank).take(d));
        }
        let d = rng.random_range(d_min..=d_max);
        frame_labels.extend(core::iter::repeat(tok).take(d));
        prev = Some(tok);
    }

    let f = cfg.feat_dim;
    let pause = &prototypes[cfg.vocab_tokens];
    let mut data = Vec::with_capacity(frame_labels.len() * f);
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    for &l in &frame_labels {
        let proto = if l == blank { pause } else { &prototypes[l as usize] };
        for &p in proto {
            let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(p + n);
        }
    }
    let features = Matrix::from_vec(frame_labels.len(), f, data).expect("rendered shape");
    Utterance { id, split, features, golden: Transcript(golden), frame_labels }
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn get(&self, id: u64) -> Option<&Utterance> {
        // Ids are dense and stored in order.
        self.utterances.get(id as usize).filter(|u| u.id == id)
    }

    pub fn blank(&self) -> TokenId {
        self.config.vocab_tokens as TokenId
    }

    /// Labeled examples for a split that carries labels for training or
    /// evaluation.
    pub fn labeled_view(&self, split: Split) -> Vec<LabeledUtt<'_>> {
        assert_ne!(split, Split::Unlabeled, "unlabeled transcripts are oracle-only");
        self.split(split)
            .map(|u| LabeledUtt { id: u.id, features: &u.features, transcript: &u.golden })
            .collect()
    }

    /// Unlabeled examples: features only.
    pub fn unlabeled_view(&self) -> Vec<UnlabeledUtt<'_>> {
        self.split(Split::Unlabeled).map(|u| UnlabeledUtt { id: u.id, features: &u.features }).collect()
    }

    /// Golden transcripts of the unlabeled split, for analysis only.
    pub fn oracle(&self) -> GoldenOracle<'_> {
        GoldenOracle { by_id: self.split(Split::Unlabeled).map(|u| (u.id, &u.golden)).collect() }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabeledUtt<'a> {
    pub id: u64,
    pub features: &'a Matrix,
    pub transcript: &'a Transcript,
}

#[derive(Debug, Clone, Copy)]
pub struct UnlabeledUtt<'a> {
    pub id: u64,
    pub features: &'a Matrix,
}

/// Read access to hidden transcripts. Only analysis fields may depend on it.
pub trait Oracle {
    fn golden(&self, id: u64) -> Option<&Transcript>;
}

pub struct GoldenOracle<'a> {
    by_id: BTreeMap<u64, &'a Transcript>,
}

impl Oracle for GoldenOracle<'_> {
    fn golden(&self, id: u64) -> Option<&Transcript> {
        self.by_id.get(&id).copied()
    }
}

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / core::f64::consts::SQRT_2)
}

/// Closed-form estimate of the per-frame accuracy of a nearest-prototype
/// classifier under isotropic noise `sigma`, averaged over the classes.
///
/// Confusing `i` with `j` needs the noise projected on `p_j - p_i` to exceed
/// half their distance; treating those events as independent gives
/// `P(correct | i) ~ prod_j Phi(|p_i - p_j| / (2 sigma))`.
pub fn nearest_prototype_accuracy(prototypes: &[Vec<f64>], sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    let n = prototypes.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut p = 1.0;
        for j in 0..n {
            if i != j {
                let d2: f64 = prototypes[i].iter().zip(&prototypes[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                p *= phi(libm::sqrt(d2) / (2.0 * sigma));
            }
        }
        total += p;
    }
    total / n as f64
}

/// Index of the prototype closest to `x`.
pub fn nearest_prototype(prototypes: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, p) in prototypes.iter().enumerate() {
        let d: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// How batches are formed from a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Fixed number of utterances (the last batch of an epoch may be smaller).
    Static(usize),
    /// Greedy packing up to a total number of frames.
    MaxFrames(usize),
}

/// Endless, reshuffled-per-epoch stream of batches over a fixed item list.
/// Batches are lists of positions into that list.
#[derive(Debug)]
pub struct Batcher {
    lengths: Vec<usize>,
    mode: BatchMode,
    rng: Rng,
    queue: Vec<Vec<usize>>,
}

impl Batcher {
    pub fn new(lengths: Vec<usize>, mode: BatchMode, rng: Rng) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::invalid("cannot batch an empty split"));
        }
        match mode {
            BatchMode::Static(0) | BatchMode::MaxFrames(0) => return Err(Error::invalid("batch size must be >= 1")),
            BatchMode::MaxFrames(m) => {
                if let Some(&l) = lengths.iter().find(|&&l| l > m) {
                    return Err(Error::invalid(format!("utterance of {l} frames exceeds max_frames {m}")));
                }
            }
            BatchMode::Static(_) => {}
        }
        Ok(Batcher { lengths, mode, rng, queue: Vec::new() })
    }

    fn refill(&mut self) {
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches = Vec::new();
        match self.mode {
            BatchMode::Static(n) => batches.extend(order.chunks(n).map(|c| c.to_vec())),
            BatchMode::MaxFrames(m) => {
                let mut cur = Vec::new();
                let mut frames = 0;
                for i in order {
                    if frames + self.lengths[i] > m && !cur.is_empty() {
                        batches.push(core::mem::take(&mut cur));
                        frames = 0;
                    }
                    frames += self.lengths[i];
                    cur.push(i);
                }
                if !cur.is_empty() {
                    batches.push(cur);
                }
            }
        }
        batches.reverse();
        self.queue = batches;
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.refill();
        }
        self.queue.pop().expect("refill produces at least one batch")
    }
}

/// Checks that collapsing the frame labels of `utt` recovers its transcript.
pub fn is_ctc_realizable(utt: &Utterance, blank: TokenId) -> bool {
    collapse(&Alignment(utt.frame_labels.clone()), blank) == utt.golden
}
