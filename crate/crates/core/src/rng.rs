//! Counter-based random streams.
//!
//! Every task draws from its own ChaCha stream, addressed by the master seed
//! and a stream number, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream number for sub-task `sub` of replicate `rep`.
pub fn replicate_stream(rep: u64, sub: u64) -> u64 {
    (rep << 32) | (sub & 0xffff_ffff)
}
