//! Seeding scheme.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`], a
//! counter-based stream cipher generator, keyed by a 64-bit seed derived
//! from the single global seed. Derivation is a SplitMix64 finalizer chained
//! over the global seed, an FNV-1a hash of a string label (utterance id,
//! tensor name, stage name) and an integer index (epoch, step). Because a
//! stream depends only on its derived key, results do not depend on how work
//! is spread over threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `hash(global_seed, label, index)`.
pub fn derive_seed(global: u64, label: &str, index: u64) -> u64 {
    let a = splitmix64(global);
    let b = splitmix64(a ^ fnv1a(label.as_bytes()));
    splitmix64(b ^ splitmix64(index))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(global: u64, label: &str, index: u64) -> Rng {
    rng_from(derive_seed(global, label, index))
}
