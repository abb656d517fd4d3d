//! Keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream selected by
//! `(seed, domain, keys...)`, so a rollout's randomness depends only on its
//! identity and never on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Rollout = 1,
    Task = 2,
    Prompts = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn keyed(seed: u64, domain: Domain, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &k in keys {
        h = splitmix64(h ^ splitmix64(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    rng.set_stream(domain as u64);
    rng
}
