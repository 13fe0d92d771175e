//! Seeded random streams.
//!
//! Every random decision in the workbench draws from a ChaCha8 generator. A
//! run seed is split into independent substreams by purpose: the seed fixes
//! the key and the purpose fixes the ChaCha stream id, so adding draws to one
//! purpose never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named purposes for substreams. Values are part of the reproducibility
/// contract; append new purposes, never renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Vocabulary = 1,
    Products = 2,
    Queries = 3,
    Engagement = 4,
    Judgments = 5,
    PtPredictions = 6,
    EvalCorruption = 7,
    EncoderInit = 8,
    Sampling = 9,
    Typos = 10,
    Mining = 11,
    RrmSplit = 12,
    RrmInit = 13,
    RandomNegatives = 14,
    EvalSplit = 15,
    BatchOrder = 16,
}

/// Generator for `purpose` under run seed `seed`.
pub fn substream(seed: u64, purpose: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Generator for `purpose`, further keyed by an index (epoch, iteration).
pub fn indexed_substream(seed: u64, purpose: Stream, index: u64) -> Rng {
    let mixed = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    substream(mixed, purpose)
}
