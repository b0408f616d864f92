//! Edit distance and error rates.
//!
//! The same Levenshtein statistics serve as evaluation metrics (TER, WER on
//! dev/test) and as the pseudo-label evolution signal that drives the cache.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, TokenId};

/// A blank-free token sequence. May be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript(pub Vec<TokenId>);

impl Transcript {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Transcript(tokens)
    }

    pub fn empty() -> Self {
        Transcript(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    /// Checks the blank-free invariant for an output layer whose blank is `blank`.
    pub fn validate(&self, blank: TokenId) -> Result<()> {
        match self.0.iter().position(|&t| t >= blank) {
            Some(i) => Err(Error::invalid(alloc::format!(
                "token {} at position {i} is not below the blank id {blank}",
                self.0[i]
            ))),
            None => Ok(()),
        }
    }

    /// Splits on `boundary`, dropping empty words.
    pub fn words(&self, boundary: TokenId) -> Vec<&[TokenId]> {
        self.0
            .split(|&t| t == boundary)
            .filter(|w| !w.is_empty())
            .collect()
    }
}

impl From<Vec<TokenId>> for Transcript {
    fn from(v: Vec<TokenId>) -> Self {
        Transcript(v)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditStats {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Edits over reference length, with the empty-reference convention
    /// `0` for an empty hypothesis and `1` otherwise. Not clipped.
    pub fn rate(&self) -> f64 {
        error_rate(self.total(), self.ref_len)
    }
}

impl core::ops::Add for EditStats {
    type Output = EditStats;
    fn add(self, o: EditStats) -> EditStats {
        EditStats {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl core::iter::Sum for EditStats {
    fn sum<I: Iterator<Item = EditStats>>(iter: I) -> Self {
        iter.fold(EditStats::default(), |a, b| a + b)
    }
}

fn error_rate(edits: usize, ref_len: usize) -> f64 {
    if ref_len == 0 {
        if edits == 0 {
            0.0
        } else {
            1.0
        }
    } else {
        edits as f64 / ref_len as f64
    }
}

/// Minimal unit-cost edit script from `reference` to `hypothesis`, broken
/// down by operation.
///
/// Among optimal scripts the decomposition prefers substitutions, then
/// deletions, then insertions when backtracking.
pub fn levenshtein<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditStats {
    let n = reference.len();
    let m = hypothesis.len();
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut stats = EditStats { ref_len: n, ..EditStats::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                if !same {
                    stats.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == d[(i - 1) * w + j] + 1 {
            stats.deletions += 1;
            i -= 1;
        } else {
            stats.insertions += 1;
            j -= 1;
        }
    }
    stats
}

/// Token error rate. Can exceed 1.
pub fn ter(reference: &Transcript, hypothesis: &Transcript) -> f64 {
    levenshtein(reference.tokens(), hypothesis.tokens()).rate()
}

/// Pooled token error rate over a batch: total edits over total reference length.
pub fn batch_ter(references: &[Transcript], hypotheses: &[Transcript]) -> Result<f64> {
    Ok(batch_stats(references, hypotheses)?.rate())
}

pub fn batch_stats(references: &[Transcript], hypotheses: &[Transcript]) -> Result<EditStats> {
    if references.len() != hypotheses.len() {
        return Err(Error::invalid(alloc::format!(
            "batch length mismatch: {} references, {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    Ok(references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| levenshtein(r.tokens(), h.tokens()))
        .sum())
}

/// Word error rate over sequences of word ids (or any comparable word unit).
pub fn wer<W: PartialEq>(reference_words: &[W], hypothesis_words: &[W]) -> f64 {
    levenshtein(reference_words, hypothesis_words).rate()
}

/// Word-level edit statistics for transcripts whose words are separated by
/// the `boundary` token.
pub fn word_stats(reference: &Transcript, hypothesis: &Transcript, boundary: TokenId) -> EditStats {
    levenshtein(&reference.words(boundary), &hypothesis.words(boundary))
}

/// Pooled WER over a batch of transcripts split on `boundary`.
pub fn batch_wer(references: &[Transcript], hypotheses: &[Transcript], boundary: TokenId) -> Result<f64> {
    if references.len() != hypotheses.len() || references.is_empty() {
        return Err(Error::invalid("batch_wer needs equal, non-zero batch lengths"));
    }
    let stats: EditStats = references
        .iter()
        .zip(hypotheses)
        .map(|(r, h)| word_stats(r, h, boundary))
        .sum();
    Ok(stats.rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    /// Exponential-time recursive edit distance.
    fn oracle(a: &[u32], b: &[u32]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ar)), Some((y, br))) => {
                let sub = oracle(ar, br) + usize::from(x != y);
                let del = oracle(ar, b) + 1;
                let ins = oracle(a, br) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    fn t(v: &[u32]) -> Transcript {
        Transcript(v.to_vec())
    }

    #[test]
    fn identity_and_empty_reference() {
        let s = levenshtein(&[1, 2, 3], &[1, 2, 3]);
        assert_eq!((s.total(), s.ref_len), (0, 3));
        let s = levenshtein::<u32>(&[], &[4, 4]);
        assert_eq!(s, EditStats { insertions: 2, ..Default::default() });
    }

    #[test]
    fn worked_example_matches_oracle() {
        let (r, h) = ([1, 2, 3, 4], [1, 3, 5, 4]);
        let s = levenshtein(&r, &h);
        assert_eq!(s.total(), oracle(&r, &h));
        assert_eq!(s.total(), 2);
        assert_eq!(s.ref_len, 4);
    }

    #[test]
    fn ter_examples() {
        assert_eq!(ter(&t(&[1, 2]), &t(&[1, 2])), 0.0);
        assert_eq!(ter(&t(&[1, 2]), &t(&[2, 2])), 0.5);
        assert_eq!(ter(&t(&[1]), &t(&[1, 2, 3])), oracle(&[1], &[1, 2, 3]) as f64);
        assert_eq!(ter(&t(&[1]), &t(&[1, 2, 3])), 2.0);
        assert_eq!(ter(&t(&[]), &t(&[])), 0.0);
        assert_eq!(ter(&t(&[]), &t(&[3])), 1.0);
    }

    #[test]
    fn batch_ter_pools_rather_than_averages() {
        let refs = [t(&[1, 2]), t(&[3, 4])];
        let hyps = [t(&[1, 1]), t(&[3, 4])];
        assert_eq!(batch_ter(&refs, &hyps).unwrap(), 0.25);
        assert_eq!(batch_ter(&refs, &refs).unwrap(), 0.0);
        assert!(batch_ter(&refs, &hyps[..1]).is_err());
        assert!(batch_ter(&[], &[]).is_err());
    }

    #[test]
    fn wer_mirrors_ter_on_word_ids() {
        assert_eq!(wer(&["a", "b"], &["a", "b"]), 0.0);
        assert_eq!(wer(&["a", "b"], &["b", "b"]), 0.5);
        assert_eq!(wer(&["a"], &["a", "b", "c"]), oracle(&[0], &[0, 1, 2]) as f64);
    }

    #[test]
    fn word_split_on_boundary() {
        // boundary 0: "12 3" vs "12 4"
        let r = t(&[0, 1, 2, 0, 3, 0]);
        let h = t(&[1, 2, 0, 0, 4]);
        assert_eq!(r.words(0).len(), 2);
        assert_eq!(word_stats(&r, &h, 0).total(), 1);
        assert_eq!(batch_wer(&[r], &[h], 0).unwrap(), 0.5);
    }

    fn seq(max: usize, alphabet: u32) -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::vec(0..alphabet, 0..=max)
    }

    proptest! {
        #[test]
        fn equals_recursive_oracle(a in seq(6, 4), b in seq(6, 4)) {
            let s = levenshtein(&a, &b);
            prop_assert_eq!(s.total(), oracle(&a, &b));
            prop_assert!(s.substitutions + s.deletions <= s.ref_len);
            prop_assert_eq!(s.ref_len + s.insertions - s.deletions, b.len());
        }

        #[test]
        fn self_distance_is_zero(a in seq(10, 5)) {
            prop_assert_eq!(levenshtein(&a, &a).total(), 0);
        }

        #[test]
        fn symmetric(a in seq(8, 4), b in seq(8, 4)) {
            prop_assert_eq!(levenshtein(&a, &b).total(), levenshtein(&b, &a).total());
        }

        #[test]
        fn triangle(a in seq(8, 3), b in seq(8, 3), c in seq(8, 3)) {
            let ab = levenshtein(&a, &b).total();
            let bc = levenshtein(&b, &c).total();
            let ac = levenshtein(&a, &c).total();
            prop_assert!(ac <= ab + bc);
        }

        #[test]
        fn single_pair_batch_equals_ter(a in seq(8, 4), b in seq(8, 4)) {
            let (a, b) = (Transcript(a), Transcript(b));
            prop_assert_eq!(batch_ter(&[a.clone()], &[b.clone()]).unwrap(), ter(&a, &b));
        }

        #[test]
        fn batch_of_eight_equals_pooled_oracle(pairs in proptest::collection::vec((seq(6, 4), seq(6, 4)), 8)) {
            let refs: Vec<_> = pairs.iter().map(|p| Transcript(p.0.clone())).collect();
            let hyps: Vec<_> = pairs.iter().map(|p| Transcript(p.1.clone())).collect();
            let edits: usize = pairs.iter().map(|(a, b)| oracle(a, b)).sum();
            let len: usize = pairs.iter().map(|(a, _)| a.len()).sum();
            let expected = if len == 0 { if edits == 0 { 0.0 } else { 1.0 } } else { edits as f64 / len as f64 };
            prop_assert_eq!(batch_ter(&refs, &hyps).unwrap(), expected);
        }
    }
}
