//! Keyed random streams.
//!
//! Every draw in the crate comes from a ChaCha8 generator seeded with the
//! master seed and positioned on a stream chosen by `(purpose, t, block)`,
//! so any block of any batch can be regenerated independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Labeled = 1,
    Unlabeled = 2,
    ReplicaMonteCarlo = 3,
    EffectiveWeights = 4,
    EffectiveLogits = 5,
    Misc = 6,
}

/// Rows generated per substream when sampling datasets.
pub const BLOCK_ROWS: usize = 64;

/// Generator for `(seed, purpose, t, block)`.
///
/// `t` must fit in 24 bits and `block` in 32 bits.
pub fn stream(seed: u64, purpose: Purpose, t: u64, block: u64) -> ChaCha8Rng {
    debug_assert!(t < (1 << 24) && block < (1 << 32));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (t << 32) | block);
    rng
}
