//! Divergence detection and post-hoc statistics over step records.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Branch, Phase, StepRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceConfig {
    /// Number of most recent unlabeled-branch records examined.
    pub window: usize,
    pub max_blank_fraction: f64,
    pub min_length_ratio: f64,
    pub max_dev_ter: f64,
    /// Dev error is only considered from this step on.
    pub dev_warmup_steps: u64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig {
            window: 50,
            max_blank_fraction: 0.95,
            min_length_ratio: 0.05,
            max_dev_ter: 0.95,
            dev_warmup_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

/// Declares divergence when, over the last `window` unlabeled-branch records,
/// pseudo-labels are mostly blank or nearly empty on average, or when every
/// dev evaluation since the start of that window (past warmup) is above the
/// error threshold.
pub fn detect_divergence(recent: &[StepRecord], cfg: &DivergenceConfig) -> Option<Divergence> {
    let unlabeled: Vec<&StepRecord> = recent
        .iter()
        .filter(|r| r.branch == Branch::Unlabeled && r.blank_fraction.is_some())
        .collect();
    if cfg.window == 0 || unlabeled.len() < cfg.window {
        return None;
    }
    let window = &unlabeled[unlabeled.len() - cfg.window..];
    let first = window[0].step;
    let last = window[window.len() - 1].step;
    let n = window.len() as f64;
    let blank = window.iter().map(|r| r.blank_fraction.unwrap_or(0.0)).sum::<f64>() / n;
    if blank > cfg.max_blank_fraction {
        return Some(Divergence { step: last, reason: format!("mean pseudo-label blank fraction {blank:.3}") });
    }
    let ratio = window.iter().map(|r| r.pl_length_ratio.unwrap_or(0.0)).sum::<f64>() / n;
    if ratio < cfg.min_length_ratio {
        return Some(Divergence { step: last, reason: format!("mean pseudo-label length ratio {ratio:.3}") });
    }
    let dev: Vec<f64> = recent
        .iter()
        .filter(|r| r.step >= first && r.step >= cfg.dev_warmup_steps)
        .filter_map(|r| r.dev_ter)
        .collect();
    if !dev.is_empty() && dev.iter().all(|&d| d > cfg.max_dev_ter) {
        return Some(Divergence { step: last, reason: format!("dev TER above {} for the whole window", cfg.max_dev_ter) });
    }
    None
}

/// Pearson correlation; `None` when either series has zero variance or the
/// lengths differ or are below 2.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "value")]
pub enum Correlation {
    Defined(f64),
    TooFewPairs(usize),
    /// One of the series is constant.
    Undefined,
}

pub const MIN_CORRELATION_PAIRS: usize = 30;

/// `(pl_distance, oracle_wer)` for unlabeled-branch records carrying both.
pub fn correlation_pairs(records: &[StepRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.branch == Branch::Unlabeled)
        .filter_map(|r| Some((r.pl_distance?, r.oracle_wer?)))
        .collect()
}

/// Correlation between the per-batch pseudo-label distance and the oracle
/// error of the new pseudo-labels.
pub fn oracle_correlation(records: &[StepRecord]) -> Correlation {
    let pairs = correlation_pairs(records);
    if pairs.len() < MIN_CORRELATION_PAIRS {
        return Correlation::TooFewPairs(pairs.len());
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    match pearson(&xs, &ys) {
        Some(r) => Correlation::Defined(r),
        None => Correlation::Undefined,
    }
}

/// Means of a continuous-phase series over its first and last `fraction` of
/// records, e.g. `0.1` for deciles.
pub fn head_tail_means(records: &[StepRecord], fraction: f64, value: impl Fn(&StepRecord) -> Option<f64>) -> Option<(f64, f64)> {
    let series: Vec<f64> = records
        .iter()
        .filter(|r| r.phase == Phase::Continuous)
        .filter_map(value)
        .collect();
    let k = libm::ceil(series.len() as f64 * fraction) as usize;
    if k == 0 || series.len() < 2 * k {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&series[..k]), mean(&series[series.len() - k..])))
}
