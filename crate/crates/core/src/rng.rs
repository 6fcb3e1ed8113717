//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`RngStream`]. A stream is a
//! ChaCha8 generator keyed by a 64-bit seed with an independent 64-bit stream
//! id, so parallel trials can share a seed without overlapping.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Where a block of random numbers came from: seed, stream and the word
/// offset inside that stream at the moment the block was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Rebuilds a stream positioned exactly where `provenance` was recorded.
    pub fn resume(provenance: SeedProvenance) -> Self {
        let mut rng = Self::new(provenance.seed, provenance.stream);
        rng.inner.set_word_pos(provenance.word_pos);
        rng
    }

    /// A fresh stream with the same seed and a different stream id.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn provenance(&self) -> SeedProvenance {
        SeedProvenance {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Stream id for sub-purpose `purpose` of trial `trial`.
///
/// The low byte selects the purpose, the rest the trial, so ids never collide
/// for fewer than 2^56 trials.
pub fn trial_stream(trial: u64, purpose: u8) -> u64 {
    (trial << 8) | purpose as u64
}

pub mod purpose {
    pub const SOURCE: u8 = 1;
    pub const PLAN: u8 = 2;
    pub const TRAJECTORY: u8 = 3;
    pub const EDIT: u8 = 4;
    pub const SAMPLE: u8 = 5;
    pub const ANALYSIS: u8 = 6;
}
