//! Deterministic stream derivation for parallel sampling.
//!
//! One master seed is split into independent sub-streams keyed by
//! structural ids (subject id, entry index, purpose tag, iteration).
//! Every consumer owns its stream, so results do not depend on thread
//! scheduling: the same `(seed, ids)` always yields the same draws on
//! every platform.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One standard-normal draw.
#[inline]
pub fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Purpose tags keeping unrelated streams disjoint.
pub mod purpose {
    pub const THETA_INIT: u64 = 1;
    pub const THETA_CHAIN: u64 = 2;
    pub const SUBJECT_ACCEPT: u64 = 3;
    pub const EM_ITERATION: u64 = 4;
    pub const SIM_COVARIATES: u64 = 16;
    pub const SIM_INTERCEPT: u64 = 17;
    pub const SIM_RANDOM_EFFECTS: u64 = 18;
    pub const SIM_COEF: u64 = 19;
    pub const SIM_RESPONSE: u64 = 20;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `ids` into `master`, producing a well-separated 64-bit key.
pub fn mix_key(master: u64, ids: &[u64]) -> u64 {
    let mut state = master ^ GOLDEN;
    let mut acc = splitmix64(&mut state);
    for &id in ids {
        state ^= id.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Derive an independent ChaCha8 stream for `(master, ids)`.
pub fn derive_rng(master: u64, ids: &[u64]) -> ChaCha8Rng {
    let mut state = master ^ GOLDEN;
    let mut key = [0u8; 32];
    // Absorb ids, then squeeze four words for the key.
    for &id in ids {
        state ^= id.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        splitmix64(&mut state);
    }
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
