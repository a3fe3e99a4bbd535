//! Seeded random streams.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a path of indices
/// (e.g. epoch, dialog id). SplitMix64 finalizer per component.
pub fn derived(seed: u64, path: &[u64]) -> Rng {
    let mut s = seed;
    for &p in path {
        s = mix(s ^ mix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    seeded(s)
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
