//! CTC objective, collapse, greedy decoding and temperature-scaled alignment
//! sampling.
//!
//! The blank is always the last output class (`V - 1`). All probabilities
//! are computed in log space.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::metrics::Transcript;
use crate::{Error, Result, TokenId};

/// Raw per-frame scores, `T x V`, blank at column `V - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLogits(Matrix);

impl FrameLogits {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() < 1 || values.cols() < 2 {
            return Err(Error::invalid(alloc::format!(
                "frame logits need T >= 1 and V >= 2, got {}x{}",
                values.rows(),
                values.cols()
            )));
        }
        if values.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("frame logits contain non-finite values"));
        }
        Ok(FrameLogits(values))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn blank(&self) -> TokenId {
        (self.0.cols() - 1) as TokenId
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

/// Per-frame distribution obtained from logits at temperature `temperature`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosterior {
    pub values: Matrix,
    pub temperature: f64,
}

/// One label per frame, blanks included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment(pub Vec<TokenId>);

impl Alignment {
    pub fn blank_count(&self, blank: TokenId) -> usize {
        self.0.iter().filter(|&&l| l == blank).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcOutput {
    /// Negative log-likelihood; `+inf` when the target cannot be aligned.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. the logits (zero when infeasible).
    pub grad: Matrix,
    pub feasible: bool,
}

/// Minimum number of frames needed to emit `target`: one per token plus one
/// blank between each pair of equal neighbours.
pub fn min_frames(target: &[TokenId]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + libm::log1p(libm::exp(-(a - b).abs()))
}

pub(crate) fn log_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
    let lse = max + libm::log(sum);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// CTC negative log-likelihood of `target` and its gradient w.r.t. the logits.
///
/// Forward-backward over the blank-extended target `# l1 # l2 # ... # lL #`.
/// `alpha[t][s]` is the log-probability of all prefixes ending in state `s`
/// at frame `t` (emission included); `beta[t][s]` covers frames `t+1..T`
/// given state `s` at `t` (emission at `t` excluded), so the state occupancy
/// is `exp(alpha + beta - log p)` and each gradient row is
/// `softmax - occupancy`.
pub fn ctc_loss_grad(logits: &FrameLogits, target: &Transcript) -> Result<CtcOutput> {
    let t_len = logits.frames();
    let v = logits.classes();
    let blank = logits.blank();
    target.validate(blank)?;
    let labels = target.tokens();

    if min_frames(labels) > t_len {
        return Ok(CtcOutput { loss: f64::INFINITY, grad: Matrix::zeros(t_len, v), feasible: false });
    }

    let mut logp = Matrix::zeros(t_len, v);
    for t in 0..t_len {
        log_softmax(logits.values().row(t), logp.row_mut(t));
    }

    let s_len = 2 * labels.len() + 1;
    let ext = |s: usize| -> TokenId {
        if s % 2 == 0 {
            blank
        } else {
            labels[s / 2]
        }
    };
    // State s may be entered from s-2 when it is a label differing from s-2's.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && ext(s) != ext(s - 2);

    let neg = f64::NEG_INFINITY;
    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = logp[(0, blank as usize)];
    if s_len > 1 {
        alpha[1] = logp[(0, ext(1) as usize)];
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_sum_exp(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_sum_exp(acc, prev[s - 2]);
            }
            cur[s] = if acc == neg { neg } else { acc + logp[(t, ext(s) as usize)] };
        }
    }

    let mut beta = vec![neg; t_len * s_len];
    let last = (t_len - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        for s in 0..s_len {
            let step = |s2: usize| next[s2] + logp[(t + 1, ext(s2) as usize)];
            let mut acc = step(s);
            if s + 1 < s_len {
                acc = log_sum_exp(acc, step(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_sum_exp(acc, step(s + 2));
            }
            cur[s] = acc;
        }
    }

    let end = &alpha[last..];
    let log_likelihood = if s_len > 1 { log_sum_exp(end[s_len - 1], end[s_len - 2]) } else { end[0] };
    if !log_likelihood.is_finite() {
        return Ok(CtcOutput { loss: f64::INFINITY, grad: Matrix::zeros(t_len, v), feasible: false });
    }

    let mut grad = Matrix::zeros(t_len, v);
    for t in 0..t_len {
        let row = grad.row_mut(t);
        for (g, &lp) in row.iter_mut().zip(logp.row(t)) {
            *g = libm::exp(lp);
        }
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_likelihood;
            if occ > neg {
                row[ext(s) as usize] -= libm::exp(occ);
            }
        }
    }

    Ok(CtcOutput { loss: -log_likelihood, grad, feasible: true })
}

/// Merges consecutive repeats, then drops blanks.
pub fn collapse(alignment: &Alignment, blank: TokenId) -> Transcript {
    collapse_labels(&alignment.0, blank)
}

pub(crate) fn collapse_labels(labels: &[TokenId], blank: TokenId) -> Transcript {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in labels {
        if Some(l) != prev && l != blank {
            out.push(l);
        }
        prev = Some(l);
    }
    Transcript(out)
}

/// Row argmax; ties resolve to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_alignment(logits: &FrameLogits) -> Alignment {
    Alignment(logits.values().iter_rows().map(|r| argmax(r) as TokenId).collect())
}

/// Hard pseudo-label: per-frame argmax, collapsed.
pub fn greedy_decode(logits: &FrameLogits, blank: TokenId) -> Transcript {
    collapse(&greedy_alignment(logits), blank)
}

/// Row-wise softmax of `logits / temperature`; at `temperature == 0` each row
/// is one-hot on its argmax.
pub fn apply_temperature(logits: &FrameLogits, temperature: f64) -> Result<FramePosterior> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(alloc::format!("temperature must be finite and >= 0, got {temperature}")));
    }
    let src = logits.values();
    let mut values = Matrix::zeros(src.rows(), src.cols());
    for t in 0..src.rows() {
        let row = src.row(t);
        let out = values.row_mut(t);
        if temperature == 0.0 {
            out[argmax(row)] = 1.0;
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in out.iter_mut().zip(row) {
            *o = libm::exp((x - max) / temperature);
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(FramePosterior { values, temperature })
}

/// Draws an index from a probability row by inverse CDF. Zero-probability
/// entries are never returned.
fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// Samples every frame label independently from the tempered posterior.
pub fn sample_alignment<R: Rng + ?Sized>(logits: &FrameLogits, temperature: f64, rng: &mut R) -> Result<Alignment> {
    let post = apply_temperature(logits, temperature)?;
    Ok(Alignment(post.values.iter_rows().map(|r| sample_row(r, rng) as TokenId).collect()))
}

/// Sampled pseudo-label: a frame-wise draw from the tempered posterior, collapsed.
pub fn sample_decode<R: Rng + ?Sized>(
    logits: &FrameLogits,
    temperature: f64,
    blank: TokenId,
    rng: &mut R,
) -> Result<Transcript> {
    Ok(collapse(&sample_alignment(logits, temperature, rng)?, blank))
}

/// Shannon entropy (nats) of a probability row.
pub fn entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * libm::log(p)).sum()
}
