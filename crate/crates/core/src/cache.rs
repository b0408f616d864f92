//! The pseudo-label cache and the eviction probability `p_out`.
//!
//! The cache holds whole unlabeled batches together with the pseudo-labels
//! attached to them and the model step that produced those labels. During
//! continuous training a batch is drawn uniformly, trained on, and then
//! either evicted (with probability `p_out`) in favour of a fresh batch, or
//! put back with its old or freshly regenerated labels.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::metrics::{self, Transcript};
use crate::rng::Rng;
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub batch_id: u64,
    pub utterances: Vec<u64>,
    pub pls: Vec<Transcript>,
    /// Model step at which `pls` were generated.
    pub created_step: u64,
}

impl CacheEntry {
    pub fn new(batch_id: u64, utterances: Vec<u64>, pls: Vec<Transcript>, created_step: u64) -> Result<Self> {
        if utterances.len() != pls.len() {
            return Err(Error::invalid(format!(
                "cache entry has {} utterances but {} pseudo-labels",
                utterances.len(),
                pls.len()
            )));
        }
        Ok(CacheEntry { batch_id, utterances, pls, created_step })
    }
}

/// What goes back into the cache when a drawn batch is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Writeback {
    /// The batch with the labels it was drawn with.
    Old,
    /// The batch with labels regenerated by the current model.
    New,
}

impl FromStr for Writeback {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "old" => Ok(Writeback::Old),
            "new" => Ok(Writeback::New),
            _ => Err(Error::invalid(format!("unknown write-back `{s}` (old|new)"))),
        }
    }
}

#[derive(Debug)]
pub struct Cache {
    capacity: usize,
    entries: Vec<CacheEntry>,
    /// Batch id of the entry handed out by `draw` and not yet resolved.
    outstanding: Option<u64>,
    rng: Rng,
}

impl Cache {
    pub fn new(capacity: usize, rng: Rng) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("cache capacity must be >= 1"));
        }
        Ok(Cache { capacity, entries: Vec::with_capacity(capacity), outstanding: None, rng })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Full, counting a drawn-but-unresolved entry as present.
    pub fn is_full(&self) -> bool {
        self.entries.len() + usize::from(self.outstanding.is_some()) == self.capacity
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    /// Adds an entry during the fill phase.
    pub fn insert(&mut self, entry: CacheEntry, now: u64) -> Result<()> {
        if self.outstanding.is_some() {
            return Err(Error::Cache("insert while a drawn entry is unresolved; use readmit or replace".to_string()));
        }
        if self.entries.len() >= self.capacity {
            return Err(Error::Cache(format!("insert into a full cache (capacity {})", self.capacity)));
        }
        self.push(entry, now)
    }

    fn push(&mut self, entry: CacheEntry, now: u64) -> Result<()> {
        if entry.created_step > now {
            return Err(Error::Cache(format!(
                "entry {} created at step {} is ahead of step {now}",
                entry.batch_id, entry.created_step
            )));
        }
        if entry.utterances.len() != entry.pls.len() {
            return Err(Error::invalid("cache entry utterance / pseudo-label count mismatch"));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Removes and returns a uniformly chosen entry. The slot stays reserved
    /// until [`Cache::readmit`] or [`Cache::replace`] resolves it.
    pub fn draw(&mut self) -> Result<CacheEntry> {
        if self.outstanding.is_some() {
            return Err(Error::Cache("draw while a previous draw is unresolved".to_string()));
        }
        if self.entries.len() != self.capacity {
            return Err(Error::Cache(format!(
                "draw from a cache holding {} of {} entries",
                self.entries.len(),
                self.capacity
            )));
        }
        let i = self.rng.random_range(0..self.entries.len());
        let entry = self.entries.swap_remove(i);
        self.outstanding = Some(entry.batch_id);
        Ok(entry)
    }

    fn resolve(&mut self, batch_id: u64) -> Result<()> {
        match self.outstanding {
            Some(id) if id == batch_id => {
                self.outstanding = None;
                Ok(())
            }
            Some(id) => Err(Error::Cache(format!("readmit of batch {batch_id} but batch {id} is outstanding"))),
            None => Err(Error::Cache("no drawn entry to resolve".to_string())),
        }
    }

    /// Puts a drawn entry back. `Old` keeps it bit-identical; `New` swaps in
    /// `fresh_pls` stamped with `now`.
    pub fn readmit(&mut self, mut entry: CacheEntry, writeback: Writeback, fresh_pls: Vec<Transcript>, now: u64) -> Result<()> {
        if writeback == Writeback::New {
            if fresh_pls.len() != entry.utterances.len() {
                return Err(Error::invalid("fresh pseudo-labels do not match the drawn batch"));
            }
            entry.pls = fresh_pls;
            entry.created_step = now;
        }
        self.resolve(entry.batch_id)?;
        self.push(entry, now)
    }

    /// Eviction decision for the outstanding draw: `true` with probability `p_out`.
    pub fn coin(&mut self, p_out: f64) -> bool {
        self.rng.random::<f64>() < p_out
    }

    /// Fills the slot of the outstanding draw with a fresh batch.
    pub fn replace(&mut self, fresh: CacheEntry, now: u64) -> Result<()> {
        let id = self.outstanding.ok_or_else(|| Error::Cache("replace without a drawn entry".to_string()))?;
        self.outstanding = None;
        if let Err(e) = self.push(fresh, now) {
            self.outstanding = Some(id);
            return Err(e);
        }
        Ok(())
    }
}

/// Maps pseudo-label evolution to a removal probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvolutionMap {
    /// `x -> x`: stable labels stay in the cache.
    Identity,
    /// `x -> 1 - x`: fast-changing labels stay in the cache.
    OneMinus,
}

impl EvolutionMap {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            EvolutionMap::Identity => x,
            EvolutionMap::OneMinus => 1.0 - x,
        }
    }

    fn name(self) -> &'static str {
        match self {
            EvolutionMap::Identity => "identity",
            EvolutionMap::OneMinus => "one_minus",
        }
    }
}

impl FromStr for EvolutionMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(EvolutionMap::Identity),
            "one_minus" => Ok(EvolutionMap::OneMinus),
            _ => Err(Error::invalid(format!("unknown evolution map `{s}` (identity|one_minus)"))),
        }
    }
}

/// How the distance between old and new pseudo-labels is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "unit")]
pub enum Distance {
    /// Pooled token error rate.
    Token,
    /// Pooled word error rate, words split on `boundary`.
    Word { boundary: TokenId },
}

impl Distance {
    /// Distance between the labels a batch was cached with and its current
    /// labels, pooled over the batch. Unclipped.
    pub fn between(self, old: &[Transcript], new: &[Transcript]) -> Result<f64> {
        match self {
            Distance::Token => metrics::batch_ter(old, new),
            Distance::Word { boundary } => metrics::batch_wer(old, new, boundary),
        }
    }
}

/// Eviction probability policy. Text form (used by configs and flags):
/// `constant:P`, `scheduled:P1:P2:K`, `dynamic:F`, `dynamic_then_one:F:K`
/// with `F` one of `identity`, `one_minus`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PoutStrategy {
    Constant(f64),
    /// `before` while `step < switch_step`, `after` from then on.
    Scheduled { before: f64, after: f64, switch_step: u64 },
    Dynamic(EvolutionMap),
    /// Dynamic while `step < switch_step`, then always evict.
    DynamicThenOne { map: EvolutionMap, switch_step: u64 },
}

impl PoutStrategy {
    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        match *self {
            PoutStrategy::Constant(p) if !ok(p) => Err(Error::invalid(format!("p_out {p} outside [0, 1]"))),
            PoutStrategy::Scheduled { before, after, .. } if !ok(before) || !ok(after) => {
                Err(Error::invalid("scheduled p_out values must be in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_dynamic_at(&self, step: u64) -> bool {
        match *self {
            PoutStrategy::Dynamic(_) => true,
            PoutStrategy::DynamicThenOne { switch_step, .. } => step < switch_step,
            _ => false,
        }
    }

    /// Removal probability at `step` given the (unclipped) label distance.
    pub fn probability(&self, step: u64, distance: f64) -> f64 {
        match *self {
            PoutStrategy::Constant(p) => p,
            PoutStrategy::Scheduled { before, after, switch_step } => {
                if step < switch_step {
                    before
                } else {
                    after
                }
            }
            PoutStrategy::Dynamic(map) => clamp01(map.apply(distance)),
            PoutStrategy::DynamicThenOne { map, switch_step } => {
                if step < switch_step {
                    clamp01(map.apply(distance))
                } else {
                    1.0
                }
            }
        }
    }
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// `p_out` for a drawn batch with token-level distance between its cached
/// and regenerated labels.
pub fn compute_pout(strategy: &PoutStrategy, step: u64, old_pls: &[Transcript], new_pls: &[Transcript]) -> Result<f64> {
    let d = Distance::Token.between(old_pls, new_pls)?;
    Ok(strategy.probability(step, d))
}

impl fmt::Display for PoutStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PoutStrategy::Constant(p) => write!(f, "constant:{p}"),
            PoutStrategy::Scheduled { before, after, switch_step } => write!(f, "scheduled:{before}:{after}:{switch_step}"),
            PoutStrategy::Dynamic(m) => write!(f, "dynamic:{}", m.name()),
            PoutStrategy::DynamicThenOne { map, switch_step } => write!(f, "dynamic_then_one:{}:{switch_step}", map.name()),
        }
    }
}

fn parse_num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::invalid(format!("bad {what} `{s}`")))
}

impl FromStr for PoutStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let strategy = match parts.as_slice() {
            ["constant", p] => PoutStrategy::Constant(parse_num(p, "probability")?),
            ["scheduled", a, b, k] => PoutStrategy::Scheduled {
                before: parse_num(a, "probability")?,
                after: parse_num(b, "probability")?,
                switch_step: parse_num(k, "switch step")?,
            },
            ["dynamic", m] => PoutStrategy::Dynamic(m.parse()?),
            ["dynamic_then_one", m, k] => {
                PoutStrategy::DynamicThenOne { map: m.parse()?, switch_step: parse_num(k, "switch step")? }
            }
            _ => return Err(Error::invalid(format!("cannot parse p_out strategy `{s}`"))),
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

impl TryFrom<String> for PoutStrategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PoutStrategy> for String {
    fn from(p: PoutStrategy) -> String {
        p.to_string()
    }
}
