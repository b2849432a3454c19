//! Seed derivation helpers.
//!
//! All stochastic components are driven by ChaCha8 streams whose seeds are
//! mixed from a root seed plus a stream tag, so regenerating any piece of
//! the pipeline is reproducible independently of the others.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with a stream tag and an index into a child seed.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ splitmix64(stream)) ^ index)
}

/// ChaCha8 stream for `(root, stream, index)`. ChaCha is stable across
/// releases, so seeded runs reproduce byte-for-byte.
pub fn rng_for(root: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, index))
}

/// Stream tags for the independent random processes.
pub mod streams {
    pub const LAYOUT: u64 = 1;
    pub const HEADINGS: u64 = 2;
    pub const DESCRIPTOR_BASIS: u64 = 3;
    pub const DESCRIPTOR_NOISE: u64 = 4;
    pub const TABLE_INIT: u64 = 5;
    pub const SAMPLER: u64 = 6;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derived_seeds_differ_across_streams_and_indices() {
        let a = derive_seed(7, streams::LAYOUT, 0);
        let b = derive_seed(7, streams::HEADINGS, 0);
        let c = derive_seed(7, streams::LAYOUT, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, streams::LAYOUT, 0));
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut r1 = rng_for(42, streams::SAMPLER, 3);
        let mut r2 = rng_for(42, streams::SAMPLER, 3);
        for _ in 0..16 {
            assert_eq!(r1.next_u64(), r2.next_u64());
        }
    }
}
