//! Seeding discipline.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by
//! `(seed, stream)`. Independent concerns get independent streams so that,
//! for example, changing the corruption rate never changes the sampled
//! inputs, and changing the model init never changes the shuffle order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids. Keep these stable: traces are expected to be reproducible
/// byte-for-byte across runs of the same build.
pub mod streams {
    pub const TOY_LABELS: u64 = 1;
    pub const TOY_NOISE: u64 = 2;
    pub const CORRUPT: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const MIXTURE_MEANS: u64 = 6;
    pub const MIXTURE_LABELS: u64 = 7;
    pub const MIXTURE_NOISE: u64 = 8;
    pub const MONTE_CARLO: u64 = 9;
    /// Epoch `e` shuffles with stream `SHUFFLE_BASE + e`.
    pub const SHUFFLE_BASE: u64 = 1 << 32;
}

/// RNG for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// splitmix64 round; used to derive per-run seeds from (config seed, run seed).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
