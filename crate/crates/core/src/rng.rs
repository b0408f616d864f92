//! Seed derivation.
//!
//! Every random decision in a run draws from a ChaCha8 stream derived from a
//! single master seed. A stream is identified by a [`Stream`] tag and an
//! optional sub-index (an utterance id, a step number); the derivation is
//!
//! ```text
//! key    = splitmix64(master ^ splitmix64(tag) ^ splitmix64(sub.rotate_left(17)))
//! stream = ChaCha8Rng::seed_from_u64(key), with word stream = tag
//! ```
//!
//! so changing, say, the augmentation policy never perturbs which cache
//! entry is drawn.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Rng;

/// Independent purposes that each get their own random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ModelInit = 1,
    Dropout = 2,
    Augment = 3,
    /// Per-utterance alignment sampling; sub-index mixes step and utterance id.
    PlSampling = 4,
    Cache = 5,
    Branch = 6,
    LabeledBatches = 7,
    UnlabeledBatches = 8,
    Prototypes = 9,
    Utterance = 10,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, sub: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream as u64) ^ splitmix64(sub.rotate_left(17)))
}

pub fn stream(master: u64, stream: Stream, sub: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(derive_seed(master, stream, sub));
    rng.set_stream(stream as u64);
    rng
}

/// Sub-index for sampling the pseudo-label of `utterance` at `step`.
pub fn pl_sub_index(step: u64, utterance: u64) -> u64 {
    splitmix64(step) ^ utterance.wrapping_mul(0xD6E8_FEB8_6659_FD93)
}
