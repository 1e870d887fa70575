//! Deterministic seed derivation.
//!
//! Every source of randomness in the pipeline is a ChaCha8 stream whose seed
//! is derived from the global seed by splitmix64 hops. Derivation is purely
//! functional, so any unit of work (an utterance, a restart, a training step)
//! can be re-seeded independently of execution order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 step: mixes `state + tag` into a well-distributed u64.
pub fn splitmix64(state: u64, tag: u64) -> u64 {
    let mut z = state
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix64(seed, tag)
}

/// Derive a child seed from a parent seed and a string label (FNV-1a hashed).
pub fn derive_str(seed: u64, label: &str) -> u64 {
    splitmix64(seed, fnv1a(label.as_bytes()))
}

/// FNV-1a over raw bytes; used to fold identifiers into seed tags.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// ChaCha8 stream for a derived seed.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// ChaCha8 stream tagged by a string label.
pub fn stream_str(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_str(seed, label))
}
