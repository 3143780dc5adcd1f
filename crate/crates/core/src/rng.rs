//! Hierarchical seed derivation.
//!
//! Every consumer of randomness (partitioning, client sampling, each client's
//! batch shuffling, parameter initialization, ...) gets its own stream derived
//! from the global seed, a domain tag and an index. Streams never share state,
//! so running clients on parallel workers cannot change any draw.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Domain tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Partition = 1,
    Split = 2,
    Sampler = 3,
    ClientTrain = 4,
    ModelInit = 5,
    ExtractorInit = 6,
    Variant = 7,
    Synthetic = 8,
    Export = 9,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(seed, domain, index)`.
pub fn derive_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    let a = splitmix64(seed);
    let b = splitmix64(a ^ (domain as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    splitmix64(b ^ index)
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> Rng {
    seeded(derive_seed(seed, domain, index))
}
