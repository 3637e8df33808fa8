//! Seeded random streams.
//!
//! Every random operation draws from ChaCha20 seeded with the user's 64-bit
//! seed and a fixed stream number for that operation, so results depend only
//! on `(seed, operation)` and never on the order in which operations run.
//! Operations that need many independent sub-streams (parallel posterior
//! draws) add the sub-stream index to the operation's base stream number.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type StreamRng = ChaCha20Rng;

/// Base stream numbers, spaced so sub-streams never collide.
pub mod streams {
    pub const SIMULATE_NOISE: u64 = 1 << 32;
    pub const CHAIN: u64 = 2 << 32;
    pub const IACT_PIXELS: u64 = 3 << 32;
    pub const INDEPENDENT_DRAWS: u64 = 4 << 32;
}

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
