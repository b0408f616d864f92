use alloc::vec::Vec;

use super::*;
use crate::cache::EvolutionMap;
use crate::data::{generate_corpus, Corpus, CorpusConfig, Split};
use crate::model::EncoderConfig;

fn small_corpus() -> Corpus {
    generate_corpus(&CorpusConfig {
        vocab_tokens: 4,
        feat_dim: 6,
        transcript_min: 2,
        transcript_max: 4,
        duration_min: 4,
        duration_max: 5,
        n_labeled: 12,
        n_unlabeled: 30,
        n_dev: 6,
        n_test: 6,
        ..CorpusConfig::default()
    })
    .unwrap()
}

fn small_model(corpus: &Corpus) -> ModelState {
    let cfg = EncoderConfig {
        feat_dim: corpus.config.feat_dim,
        vocab_size: corpus.config.vocab_tokens + 1,
        conv_channels: 8,
        hidden_dims: vec![8],
        ..EncoderConfig::default()
    };
    ModelState::init(cfg).unwrap()
}

fn small_config() -> TrainerConfig {
    TrainerConfig {
        pt_steps: 0,
        cache_capacity: 4,
        unlabeled_ratio: 1.0,
        batch: BatchMode::Static(3),
        max_steps: 30,
        eval_every: 10,
        pout: PoutStrategy::DynamicThenOne { map: EvolutionMap::Identity, switch_step: 20 },
        tau: TauSchedule::Linear { start: 1.0, end: 0.1, steps: 20 },
        ..TrainerConfig::default()
    }
}

fn data(corpus: &Corpus) -> TrainingData<'_> {
    TrainingData {
        labeled: corpus.labeled_view(Split::Labeled),
        unlabeled: corpus.unlabeled_view(),
        dev: corpus.labeled_view(Split::Dev),
    }
}

fn trainer<'a>(corpus: &'a Corpus, cfg: TrainerConfig, oracle: Option<&'a dyn Oracle>) -> Trainer<'a> {
    Trainer::new(
        small_model(corpus),
        cfg,
        LrSchedule::default(),
        AugmentConfig::default(),
        data(corpus),
        corpus.config.word_boundary,
        oracle,
    )
    .unwrap()
}

#[test]
fn fill_phase_fills_cache_and_advances_by_capacity() {
    let corpus = small_corpus();
    for pt in [0u64, 3] {
        let cfg = TrainerConfig { pt_steps: pt, ..small_config() };
        let mut t = trainer(&corpus, cfg, None);
        let mut log = Vec::new();
        t.run_pt_phase(&mut log).unwrap();
        assert_eq!(t.model().step(), pt);
        t.run_fill_phase(&mut log).unwrap();
        assert_eq!(t.model().step(), pt + 4);
        assert!(t.cache().is_full());
        assert_eq!(t.cache().len(), 4);
        for e in t.cache().entries() {
            assert!(e.created_step >= pt && e.created_step < pt + 4, "created at {}", e.created_step);
        }
        assert_eq!(log.len() as u64, pt + 4);
        assert!(log.iter().all(|r| r.branch == Branch::Labeled));
    }
}

#[test]
fn every_update_is_logged_once() {
    let corpus = small_corpus();
    let mut t = trainer(&corpus, small_config(), None);
    let mut log = Vec::new();
    let status = t.run(&mut log).unwrap();
    assert!(!status.is_diverged());
    assert_eq!(t.model().step(), 30);
    let steps: Vec<u64> = log.iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..30).collect::<Vec<_>>());
    for r in &log {
        if r.branch == Branch::Unlabeled {
            assert!(r.p_out.is_some() && r.pl_distance.is_some() && r.evicted.is_some());
            assert!(r.pl_age.unwrap() <= r.step);
        }
        assert_eq!(r.dev_ter.is_some(), (r.step + 1) % 10 == 0);
    }
}

#[test]
fn constant_one_evicts_every_unlabeled_step() {
    let corpus = small_corpus();
    let cfg = TrainerConfig { pout: PoutStrategy::Constant(1.0), ..small_config() };
    let mut t = trainer(&corpus, cfg, None);
    let mut log = Vec::new();
    t.run(&mut log).unwrap();
    let unl: Vec<_> = log.iter().filter(|r| r.branch == Branch::Unlabeled).collect();
    assert!(!unl.is_empty());
    assert!(unl.iter().all(|r| r.evicted == Some(true)));
    // Every unlabeled step trains on a batch inserted one or more steps ago
    // and never sees it again.
    let mut seen = alloc::collections::BTreeSet::new();
    for r in unl {
        assert!(seen.insert(r.batch_id.unwrap()));
    }
}

#[test]
fn constant_zero_never_evicts() {
    let corpus = small_corpus();
    let cfg = TrainerConfig { pout: PoutStrategy::Constant(0.0), ..small_config() };
    let mut t = trainer(&corpus, cfg, None);
    let mut log = Vec::new();
    t.run(&mut log).unwrap();
    assert!(log.iter().filter(|r| r.branch == Branch::Unlabeled).all(|r| r.evicted == Some(false)));
    let ids: Vec<u64> = t.cache().entries().iter().map(|e| e.batch_id).collect();
    assert!(ids.iter().all(|&id| id < 4));
}

#[test]
fn zero_ratio_reduces_to_supervised_training() {
    let corpus = small_corpus();
    let cfg = TrainerConfig { unlabeled_ratio: 0.0, dropout_high: 0.1, dropout_low: 0.1, ..small_config() };
    let mut a = trainer(&corpus, cfg.clone(), None);
    let mut log = Vec::new();
    a.run(&mut log).unwrap();
    assert!(log.iter().all(|r| r.branch == Branch::Labeled));

    let mut b = trainer(&corpus, cfg, None);
    b.run_supervised(30, &mut NullSink).unwrap();
    assert_eq!(a.model().params(), b.model().params());
}

#[test]
fn branch_frequency_matches_ratio() {
    let mut r = rng::stream(5, Stream::Branch, 0);
    let ratio = 5.0;
    let p_unl = ratio / (1.0 + ratio);
    let n = 100_000;
    let hits = (0..n).filter(|_| choose_unlabeled(&mut r, 1.0 / (1.0 + ratio))).count() as f64;
    let sd = (n as f64 * p_unl * (1.0 - p_unl)).sqrt();
    assert!((hits - n as f64 * p_unl).abs() < 3.0 * sd, "{hits}");
}

#[test]
fn runs_are_deterministic() {
    let corpus = small_corpus();
    let run = || {
        let mut t = trainer(&corpus, small_config(), None);
        let mut log = Vec::new();
        t.run(&mut log).unwrap();
        (log, t.into_model())
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    assert_eq!(la, lb);
    assert_eq!(ma.params(), mb.params());
}

struct Blind;

impl Oracle for Blind {
    fn golden(&self, _: u64) -> Option<&Transcript> {
        None
    }
}

#[test]
fn hidden_transcripts_do_not_affect_training() {
    let corpus = small_corpus();
    let mut zeroed = corpus.clone();
    for u in zeroed.utterances.iter_mut().filter(|u| u.split == Split::Unlabeled) {
        u.golden = Transcript::new(vec![0; u.golden.len()]);
    }
    let oracle = corpus.oracle();
    let oracle_z = zeroed.oracle();
    let mut a = trainer(&corpus, small_config(), Some(&oracle));
    let mut b = trainer(&zeroed, small_config(), Some(&oracle_z));
    let mut c = trainer(&corpus, small_config(), Some(&Blind));
    let (mut la, mut lb, mut lc) = (Vec::new(), Vec::new(), Vec::new());
    a.run(&mut la).unwrap();
    b.run(&mut lb).unwrap();
    c.run(&mut lc).unwrap();
    assert_eq!(a.model().params(), b.model().params());
    assert_eq!(a.model().params(), c.model().params());
    let strip = |l: &[StepRecord]| {
        l.iter()
            .map(|r| StepRecord { oracle_ter: None, oracle_wer: None, ..r.clone() })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&la), strip(&lb));
    assert_eq!(strip(&la), strip(&lc));
    assert!(la.iter().any(|r| r.oracle_ter.is_some()));
    assert!(lc.iter().all(|r| r.oracle_ter.is_none()));
}

#[test]
fn new_writeback_stores_the_regenerated_labels() {
    let corpus = small_corpus();
    let cfg = TrainerConfig { pout: PoutStrategy::Constant(0.0), writeback: Writeback::New, ..small_config() };
    let mut t = trainer(&corpus, cfg, None);
    t.run_pt_phase(&mut NullSink).unwrap();
    t.run_fill_phase(&mut NullSink).unwrap();
    let mut log = Vec::new();
    while log.iter().all(|r: &StepRecord| r.branch != Branch::Unlabeled) {
        log.clear();
        let outcome = if choose_unlabeled(&mut t.branch_rng, t.config.labeled_probability()) {
            t.unlabeled_update(&mut log).unwrap()
        } else {
            t.supervised_update(Phase::Continuous, &mut log).unwrap()
        };
        assert!(matches!(outcome, Outcome::Continue));
    }
    let r = &log[0];
    let id = r.batch_id.unwrap();
    let entry = t.cache().entries().iter().find(|e| e.batch_id == id).unwrap().clone();
    assert_eq!(entry.created_step, r.step + 1);
    let utts: Vec<UnlabeledUtt<'_>> = entry.utterances.iter().map(|&i| t.unlabeled_by_id(i).unwrap()).collect();
    let expected = generate_pls(t.model(), &utts, r.tau, r.step + 1, t.config.seed).unwrap();
    assert_eq!(entry.pls, expected.pls);
}

#[test]
fn old_writeback_keeps_labels_and_age() {
    let corpus = small_corpus();
    let cfg = TrainerConfig { pout: PoutStrategy::Constant(0.0), writeback: Writeback::Old, ..small_config() };
    let mut t = trainer(&corpus, cfg, None);
    t.run_fill_phase(&mut NullSink).unwrap();
    let before: Vec<CacheEntry> = t.cache().entries().to_vec();
    t.run_continuous_phase(&mut NullSink).unwrap();
    let mut after: Vec<CacheEntry> = t.cache().entries().to_vec();
    after.sort_by_key(|e| e.batch_id);
    let mut before = before;
    before.sort_by_key(|e| e.batch_id);
    assert_eq!(before, after);
}

#[test]
fn pl_generation_is_order_independent() {
    let corpus = small_corpus();
    let model = small_model(&corpus);
    let utts = corpus.unlabeled_view();
    let fwd = generate_pls(&model, &utts[..6], 0.7, 12, 3).unwrap();
    let rev: Vec<_> = utts[..6].iter().rev().copied().collect();
    let mut back = generate_pls(&model, &rev, 0.7, 12, 3).unwrap().pls;
    back.reverse();
    assert_eq!(fwd.pls, back);
}

#[test]
fn rejects_inconsistent_setups() {
    let corpus = small_corpus();
    let mut d = data(&corpus);
    d.unlabeled.reverse();
    let r = Trainer::new(small_model(&corpus), small_config(), LrSchedule::default(), AugmentConfig::default(), d, None, None);
    assert!(r.is_err());
    let mut t = trainer(&corpus, small_config(), None);
    assert!(t.run_continuous_phase(&mut NullSink).is_err());
}

#[test]
fn non_finite_gradient_halts_with_divergence() {
    let corpus = small_corpus();
    let mut model = small_model(&corpus);
    for p in model.params.iter_mut() {
        *p = f64::NAN;
    }
    let mut t = Trainer::new(
        model,
        small_config(),
        LrSchedule::default(),
        AugmentConfig::default(),
        data(&corpus),
        None,
        None,
    )
    .unwrap();
    let mut log = Vec::new();
    let status = t.run(&mut log).unwrap();
    assert!(status.is_diverged());
    assert_eq!(log.len(), 1);
}
