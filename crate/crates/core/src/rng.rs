//! Deterministic random streams. Every consumer of randomness draws from its
//! own ChaCha stream keyed by (run seed, purpose), so adding or removing one
//! consumer never shifts the values another one sees. That independence is
//! what lets a run with some loss weights zeroed out reproduce the reference
//! trajectory bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_ENCODER_INIT: u64 = 1;
pub const STREAM_DECODER_INIT: u64 = 2;
pub const STREAM_CLASSIFIER_INIT: u64 = 3;
pub const STREAM_SOURCE_BATCH: u64 = 4;
pub const STREAM_TARGET_BATCH: u64 = 5;
pub const STREAM_SEG_INIT: u64 = 6;
pub const STREAM_DROPOUT: u64 = 7;
pub const STREAM_SEG_BATCH: u64 = 8;
pub const STREAM_SPLIT: u64 = 9;
pub const STREAM_SYNTH: u64 = 10;

/// The RNG for one purpose within one seeded run.
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}
