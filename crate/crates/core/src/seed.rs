//! Deterministic splitting of one root seed into per-component seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named component, stable across runs and platforms.
pub fn derive_seed(root: u64, component: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in component.bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(hash))
}

pub fn component_rng(root: u64, component: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, component))
}
