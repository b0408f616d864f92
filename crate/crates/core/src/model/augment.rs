use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::{Error, Result};

/// Time and feature-band masking, switched on from `activate_after_step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub n_freq_masks: usize,
    /// Maximum width of a feature band.
    pub freq_mask_param: usize,
    pub n_time_masks: usize,
    /// Maximum width of a time band, before the ratio cap.
    pub time_mask_param: usize,
    /// Time bands are also capped at this fraction of the utterance length.
    pub max_time_mask_ratio: f64,
    pub activate_after_step: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_freq_masks: 2,
            freq_mask_param: 2,
            n_time_masks: 2,
            time_mask_param: 4,
            max_time_mask_ratio: 0.1,
            activate_after_step: 500,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_time_mask_ratio) {
            return Err(Error::invalid("max_time_mask_ratio must be in [0, 1]"));
        }
        Ok(())
    }

    fn max_time_width(&self, frames: usize) -> usize {
        let cap = libm::floor(self.max_time_mask_ratio * frames as f64) as usize;
        self.time_mask_param.min(cap).min(frames)
    }

    /// Upper bound on the fraction of zeroed cells for a `frames x dims` input.
    pub fn max_masked_fraction(&self, frames: usize, dims: usize) -> f64 {
        if frames == 0 || dims == 0 {
            return 0.0;
        }
        let f = (self.n_freq_masks * self.freq_mask_param.min(dims)) as f64 / dims as f64;
        let t = (self.n_time_masks * self.max_time_width(frames)) as f64 / frames as f64;
        (f + t).min(1.0)
    }
}

/// Zeroes random feature bands and time bands. Identity before the
/// activation step.
pub fn augment<R: Rng + ?Sized>(features: &Matrix, cfg: &AugmentConfig, step: u64, rng: &mut R) -> Matrix {
    let mut out = features.clone();
    if step < cfg.activate_after_step {
        return out;
    }
    let (frames, dims) = (features.rows(), features.cols());
    let max_f = cfg.freq_mask_param.min(dims);
    for _ in 0..cfg.n_freq_masks {
        let width = rng.random_range(0..=max_f);
        let start = rng.random_range(0..=dims - width);
        for t in 0..frames {
            out.row_mut(t)[start..start + width].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let max_t = cfg.max_time_width(frames);
    for _ in 0..cfg.n_time_masks {
        let width = rng.random_range(0..=max_t);
        let start = rng.random_range(0..=frames - width);
        for t in start..start + width {
            out.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng as ChaCha;
    use alloc::vec;
    use rand::SeedableRng;

    fn ones(t: usize, f: usize) -> Matrix {
        Matrix::from_vec(t, f, vec![1.0; t * f]).unwrap()
    }

    #[test]
    fn inactive_before_activation_step() {
        let cfg = AugmentConfig { activate_after_step: 5000, ..Default::default() };
        let x = ones(40, 8);
        assert_eq!(augment(&x, &cfg, 4999, &mut ChaCha::seed_from_u64(1)), x);
        assert_ne!(augment(&x, &AugmentConfig { n_freq_masks: 8, ..cfg.clone() }, 5000, &mut ChaCha::seed_from_u64(1)), x);
    }

    #[test]
    fn zero_width_masks_are_identity() {
        let cfg = AugmentConfig { freq_mask_param: 0, time_mask_param: 0, activate_after_step: 0, ..Default::default() };
        let x = ones(30, 6);
        assert_eq!(augment(&x, &cfg, 10, &mut ChaCha::seed_from_u64(3)), x);
    }

    #[test]
    fn masked_fraction_respects_bound() {
        let cfg = AugmentConfig {
            n_freq_masks: 2,
            freq_mask_param: 3,
            n_time_masks: 10,
            time_mask_param: 50,
            max_time_mask_ratio: 0.1,
            activate_after_step: 0,
        };
        let x = ones(60, 16);
        let bound = cfg.max_masked_fraction(60, 16);
        let mut peak: f64 = 0.0;
        for seed in 0..1000 {
            let y = augment(&x, &cfg, 1, &mut ChaCha::seed_from_u64(seed));
            let zeroed = y.as_slice().iter().filter(|&&v| v == 0.0).count() as f64 / 960.0;
            assert!(zeroed <= bound + 1e-12);
            peak = peak.max(zeroed);
        }
        assert!(peak > 0.0);
    }
}
