//! Seed derivation for independent, reproducible random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed that is mixed
//! from a root seed and a path of stream labels, so any component (a block's
//! weights, a frame's noise, a window's random pick) can be regenerated in
//! isolation without drawing from a shared sequential generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &label| splitmix64(acc ^ splitmix64(label)))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream labels, kept distinct so weight and data streams never collide.
pub(crate) mod label {
    pub const BLOCK: u64 = 1;
    pub const SPECIAL: u64 = 2;
    pub const PATCH: u64 = 3;
    pub const WINDOW: u64 = 4;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).gen();
        let b: u64 = stream(7, &[1, 2]).gen();
        let c: u64 = stream(7, &[2, 1]).gen();
        let d: u64 = stream(8, &[1, 2]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
