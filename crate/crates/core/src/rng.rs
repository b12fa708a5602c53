//! Seed discipline.
//!
//! Draws that must not depend on evaluation order are keyed by
//! `(global seed, content hash)` and pushed through a SplitMix64 finalizer,
//! i.e. a counter-based generator. Sequential streams (sampling design points,
//! noise for synthetic datasets) use ChaCha8 seeded from a derived key.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a sequence of words.
pub fn hash_words(words: impl IntoIterator<Item = u64>) -> u64 {
    words.into_iter().fold(0x6A09_E667_F3BC_C908, |acc, w| {
        splitmix64(acc ^ splitmix64(w))
    })
}

/// Hash of a float slice by bit pattern (`-0.0` and `0.0` are distinguished).
pub fn hash_f64s(values: &[f64]) -> u64 {
    hash_words(values.iter().map(|v| v.to_bits()))
}

/// Derive a child seed from a parent seed and a stream key.
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    splitmix64(seed ^ splitmix64(key.wrapping_add(GOLDEN)))
}

/// Uniform draw in [0, 1) determined entirely by `(seed, key)`.
pub fn unit_draw(seed: u64, key: u64) -> f64 {
    (derive_seed(seed, key) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn stream(seed: u64, key: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key))
}
