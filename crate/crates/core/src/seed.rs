//! Seed derivation for independent, reproducible random streams.
//!
//! Every stochastic step in the simulator draws from its own ChaCha8 stream
//! keyed by `(master seed, tag, indices...)`, so results do not depend on
//! the order in which streams are consumed or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags. Values are part of the reproducibility contract; never renumber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Population = 1,
    Partition = 2,
    Sites = 3,
    Clustering = 4,
    Train = 5,
    Network = 6,
    Drift = 7,
    InitParams = 8,
    Repeat = 9,
    Scenario = 10,
}

/// Mixes a master seed with a tag and a list of indices into a new seed.
pub fn derive_seed(master: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(stream as u64));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn rng_for(master: u64, stream: Stream, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, indices))
}
