//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a seed and a
//! fixed stream tag, so data generation, weight initialization and batch
//! ordering never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Pose = 2,
    Render = 3,
    Split = 4,
    Batch = 5,
    MaskSelect = 6,
}

pub fn stream(seed: u64, tag: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag as u64);
    rng
}

/// Stream for one element of a sequence, e.g. one training iteration.
pub fn indexed(seed: u64, tag: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(tag as u64);
    rng
}
