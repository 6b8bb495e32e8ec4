//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream keyed by the
//! run seed and a fixed stream id, so adding draws in one component never
//! perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const MODEL_INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUX_MODEL_INIT: u64 = 3;
    pub const AUX_SHUFFLE: u64 = 4;
    pub const RESAMPLE: u64 = 5;
    pub const PEER_MODEL_INIT: u64 = 6;
    pub const AUX_RESAMPLE: u64 = 7;
    pub const COLOR: u64 = 10;
    pub const JITTER: u64 = 11;
    pub const FLIP: u64 = 12;
    pub const SPLIT: u64 = 13;
    pub const TOY: u64 = 14;
    pub const SUBSET: u64 = 15;
}

/// Stream ids for one trained model: initialization, epoch permutations and
/// weighted resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    pub init: u64,
    pub shuffle: u64,
    pub resample: u64,
}

impl Streams {
    /// The model a run reports.
    pub const MAIN: Streams = Streams {
        init: stream::MODEL_INIT,
        shuffle: stream::SHUFFLE,
        resample: stream::RESAMPLE,
    };
    /// Helper models (prejudice, biased, phase-one) that must not disturb
    /// the main model's streams.
    pub const AUX: Streams = Streams {
        init: stream::AUX_MODEL_INIT,
        shuffle: stream::AUX_SHUFFLE,
        resample: stream::AUX_RESAMPLE,
    };
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
