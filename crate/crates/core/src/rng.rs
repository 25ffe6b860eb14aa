//! Seed derivation.
//!
//! A run seed is split into independent ChaCha8 streams, one per purpose. The
//! stream id is the ChaCha stream counter, so two purposes never share
//! keystream and adding draws to one purpose never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes that own a dedicated random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Family = 1,
    Init = 2,
    TrainData = 3,
    Augmentation = 4,
    LabeledBatches = 5,
    PairBatches = 6,
    Evaluation = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
