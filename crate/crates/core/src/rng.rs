//! Seed derivation.
//!
//! Every random stream in a run is keyed by the run seed plus a path of
//! integers (round, client id, purpose tag). Streams never depend on the
//! order in which work is scheduled, so parallel client updates stay
//! bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `path` into `base` to produce an independent sub-seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

/// Purpose tags used as the last element of seed paths.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const SPLIT_TEST: u64 = 2;
    pub const SPLIT_LABELED: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SELECT: u64 = 6;
    pub const SERVER: u64 = 7;
    pub const CLIENT: u64 = 8;
    pub const PROBE: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_path() {
        let a = derive_seed(42, &[1, 2]);
        let b = derive_seed(42, &[2, 1]);
        let c = derive_seed(43, &[1, 2]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, &[1, 2]));
    }
}
