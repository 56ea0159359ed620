//! Seed derivation.
//!
//! Every stochastic step draws from its own ChaCha stream keyed by the run
//! seed plus a purpose tag, so adding a consumer never shifts another
//! consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives a child seed from a parent seed, a purpose tag and an index.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ tag_hash(tag)).wrapping_add(index))
}

/// Builds the RNG stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: &str, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}
