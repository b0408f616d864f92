use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::{Error, Result};

/// Linear warmup to `peak`, constant, then multiplied by `decay_factor` at
/// each step listed in `decay_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub decay_steps: Vec<u64>,
    pub decay_factor: f64,
    /// Adagrad denominator offset.
    pub epsilon: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { peak: 0.03, warmup_steps: 0, decay_steps: Vec::new(), decay_factor: 0.5, epsilon: 1e-8 }
    }
}

impl LrSchedule {
    pub fn rate(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            step as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decays = self.decay_steps.iter().filter(|&&d| step >= d).count();
        self.peak * warm * libm::pow(self.decay_factor, decays as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak >= 0.0 && self.peak.is_finite()) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("learning rate must be >= 0 and epsilon > 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid("decay_factor must be in (0, 1]"));
        }
        Ok(())
    }
}

/// One Adagrad update. Returns the learning rate used.
///
/// A gradient with any non-finite entry leaves the state untouched and
/// reports [`Error::NonFinite`].
pub fn adagrad_step(state: &mut ModelState, grad: &[f64], schedule: &LrSchedule) -> Result<f64> {
    if grad.len() != state.params.len() {
        return Err(Error::Shape {
            expected: alloc::format!("{} gradient entries", state.params.len()),
            got: alloc::format!("{}", grad.len()),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { step: state.step });
    }
    let lr = schedule.rate(state.step);
    for ((p, a), &g) in state.params.iter_mut().zip(state.accum.iter_mut()).zip(grad) {
        *a += g * g;
        *p -= lr * g / (libm::sqrt(*a) + schedule.epsilon);
    }
    state.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;
    use alloc::vec;

    fn state() -> ModelState {
        let cfg = EncoderConfig {
            feat_dim: 1,
            conv_kernel: 1,
            conv_stride: 1,
            conv_channels: 1,
            context: 0,
            hidden_dims: vec![],
            vocab_size: 2,
            dropout: 0.0,
            seed: 1,
        };
        ModelState::init(cfg).unwrap()
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule { peak: 0.03, warmup_steps: 100, decay_steps: vec![300, 400], ..Default::default() };
        assert_eq!(s.rate(0), 0.0);
        assert_eq!(s.rate(50), 0.015);
        assert_eq!(s.rate(100), 0.03);
        assert_eq!(s.rate(299), 0.03);
        assert_eq!(s.rate(300), 0.015);
        assert_eq!(s.rate(400), 0.0075);
    }

    #[test]
    fn warmup_start_leaves_params_unchanged() {
        let mut st = state();
        let before = st.params().to_vec();
        let sched = LrSchedule { warmup_steps: 10, ..Default::default() };
        let g = vec![1.0; before.len()];
        assert_eq!(adagrad_step(&mut st, &g, &sched).unwrap(), 0.0);
        assert_eq!(st.params(), &before[..]);
        assert_eq!(st.step(), 1);
        assert!(st.accumulators().iter().all(|&a| a == 1.0));
    }

    #[test]
    fn repeated_gradient_shrinks_updates() {
        // Closed form with g = 0.5, lr = 0.1, eps = 0:
        // first step 0.1 * 0.5 / 0.5 = 0.1, second 0.1 * 0.5 / sqrt(0.5) = 0.0707...
        let mut st = state();
        let sched = LrSchedule { peak: 0.1, epsilon: 1e-300, ..Default::default() };
        let g = vec![0.5; st.params().len()];
        let p0 = st.params()[0];
        adagrad_step(&mut st, &g, &sched).unwrap();
        let p1 = st.params()[0];
        adagrad_step(&mut st, &g, &sched).unwrap();
        let p2 = st.params()[0];
        assert!(((p0 - p1) - 0.1).abs() < 1e-12);
        assert!(((p1 - p2) - 0.1 * 0.5 / libm::sqrt(0.5)).abs() < 1e-12);
        assert!((p1 - p2).abs() < (p0 - p1).abs());
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut st = state();
        let before = st.clone();
        let mut g = vec![0.0; st.params().len()];
        g[0] = f64::NAN;
        assert_eq!(adagrad_step(&mut st, &g, &LrSchedule::default()), Err(Error::NonFinite { step: 0 }));
        assert_eq!(st, before);
        assert!(adagrad_step(&mut st, &[0.0], &LrSchedule::default()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn accumulator_grows_and_update_is_bounded(grads in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let mut st = state();
            let n = st.params().len();
            let sched = LrSchedule::default();
            for g in grads {
                let before_accum = st.accumulators().to_vec();
                let before = st.params().to_vec();
                let grad = vec![g; n];
                let lr = adagrad_step(&mut st, &grad, &sched).unwrap();
                proptest::prop_assert!(st.accumulators().iter().zip(&before_accum).all(|(a, b)| a >= b));
                let norm = libm::sqrt(st.params().iter().zip(&before).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
                proptest::prop_assert!(norm <= lr * libm::sqrt(n as f64) + 1e-12);
            }
        }
    }
}
