//! Keyed random streams.
//!
//! Every draw in a run comes from a stream identified by
//! `(master_seed, repetition, learner, round, purpose)`. The key is hashed
//! into a ChaCha seed, so the values a learner sees never depend on which
//! thread ran it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Noise = 2,
    Dropout = 3,
    Partition = 4,
    Select = 5,
    Data = 6,
    Repetition = 7,
    Check = 8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub learner: u64,
    pub round: u64,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        Self {
            seed,
            learner: 0,
            round: 0,
            purpose,
        }
    }

    pub fn learner(mut self, learner: usize) -> Self {
        self.learner = learner as u64;
        self
    }

    pub fn round(mut self, round: usize) -> Self {
        self.round = round as u64;
        self
    }

    pub fn stream(self) -> Stream {
        Stream::seed_from_u64(self.digest())
    }

    fn digest(self) -> u64 {
        let mut h = splitmix(self.seed);
        for word in [self.purpose as u64, self.learner, self.round] {
            h = splitmix(h ^ splitmix(word));
        }
        h
    }
}

/// Seed for repetition `rep` of a suite run under `master`.
pub fn repetition_seed(master: u64, rep: usize) -> u64 {
    StreamKey::new(master, Purpose::Repetition)
        .round(rep)
        .digest()
}

pub fn stream(seed: u64, purpose: Purpose) -> Stream {
    StreamKey::new(seed, purpose).stream()
}

// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
