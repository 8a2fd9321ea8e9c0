//! Deterministic RNG streams.
//!
//! One run seed fans out into independent ChaCha streams keyed by purpose
//! (and, where needed, client and round). Separate streams mean that how many
//! draws one concern consumes can never shift another concern's sequence;
//! the λ=0 and μ=0 bit-identity contracts depend on batch shuffles staying
//! identical whether or not clustering runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_DATA: u64 = 1;
pub(crate) const STREAM_PARTITION: u64 = 2;
pub(crate) const STREAM_MODEL_INIT: u64 = 3;
pub(crate) const STREAM_BATCH: u64 = 4;

/// client < 2^24 and round < 2^24 keep stream ids collision-free.
pub(crate) fn stream_rng(seed: u64, purpose: u64, client: u64, round: u64) -> ChaCha8Rng {
    debug_assert!(client < (1 << 24) && round < (1 << 24));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 48) | (client << 24) | round);
    rng
}
