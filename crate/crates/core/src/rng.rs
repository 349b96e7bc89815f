//! Counter-addressed random streams.
//!
//! Every draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, purpose, a, b)`. Work items that run in parallel address their own
//! stream instead of sharing a mutable generator, so results do not depend on
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ImageSample = 1,
    DiffusionNoise = 2,
    MeasurementNoise = 3,
    Operator = 4,
    Basis = 5,
    AdaptSigma = 6,
    AdaptNoise = 7,
    Oracle = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct StreamSeed(pub u64);

impl StreamSeed {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn stream(self, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.0.to_le_bytes());
        key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
        key[16..24].copy_from_slice(&a.to_le_bytes());
        key[24..].copy_from_slice(&b.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    /// A seed offset by `delta`, used for sweeps.
    pub fn offset(self, delta: u64) -> Self {
        Self(self.0.wrapping_add(delta))
    }
}
