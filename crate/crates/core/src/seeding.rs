//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from the master seed plus a
//! purpose tag and a few integer coordinates (round, user, ...), so results
//! do not depend on the order in which clients happen to be scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Init = 2,
    Selection = 3,
    ClientTrain = 4,
    ClientCompress = 5,
    ServerCluster = 6,
    Budgets = 7,
    Probe = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(stream as u64));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn rng_for(master: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, coords))
}
