//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! master seed plus a string key. The derivation is a fixed FNV-1a hash
//! followed by a SplitMix64 finaliser, so streams are stable across
//! platforms and toolchain versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit sub-seed from `seed`, a textual stream key and an index.
pub fn derive_seed(seed: u64, key: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed
        .to_le_bytes()
        .iter()
        .chain(key.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix(h)
}

pub fn stream(seed: u64, key: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, key, index))
}
