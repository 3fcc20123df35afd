//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a root seed plus a purpose tag, so runs are reproducible
//! byte-for-byte regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a list of integer tags.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// FNV-1a over a string, for turning names into tags.
pub fn tag(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}
