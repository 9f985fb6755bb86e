//! Deterministic, splittable random number generation.
//!
//! Every stochastic component in the pipeline derives its randomness from a
//! 64-bit seed plus a short path of counters (epoch, batch index, patch
//! coordinates, ...). Any unit of work can therefore be regenerated in
//! isolation, on any worker, without replaying earlier draws, and the whole
//! pipeline is a pure function of its seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the standard finalizer-quality mixer used to expand seed
/// material into independent key words.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG keyed by a seed and an arbitrary path of 64-bit parts.
///
/// Distinct paths yield independent streams; identical (seed, path) pairs
/// yield identical streams on every platform.
pub fn keyed_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    // Absorb the path, then squeeze four key words.
    for &part in path {
        state ^= splitmix64(&mut state) ^ part.wrapping_mul(0xA24B_AED4_963E_E407);
    }
    for word in 0..4 {
        key[word * 8..(word + 1) * 8].copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// RNG for one training batch: a pure function of (seed, epoch, batch).
pub fn batch_rng(seed: u64, epoch: u64, batch: u64) -> ChaCha8Rng {
    keyed_rng(seed, &[0x6261_7463_68, epoch, batch])
}

/// Stable 64-bit hash of a string (FNV-1a), for keying RNG paths by ids.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
