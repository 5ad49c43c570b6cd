//! Seeded random streams. Each consumer draws from its own ChaCha stream so
//! adding draws in one stage never shifts another stage's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    SeedSet = 1,
    DecoderInit = 2,
    Batches = 3,
    Sampler = 4,
    FineTune = 5,
    Synthetic = 6,
    Eval = 7,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(which as u64);
    r
}
