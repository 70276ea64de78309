//! Fixtures shared by the integration tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes a tab-separated log of `users` users over 200 items with four
/// taste clusters, so that a few rounds of training beat random ranking.
pub fn write_synthetic_log(path: &Path, users: u32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    for u in 1..=users {
        let taste = rng.random_range(0..4);
        for t in 0..rng.random_range(8..30) {
            let item = if rng.random_bool(0.7) {
                1 + taste * 50 + rng.random_range(0..50)
            } else {
                1 + rng.random_range(0..200)
            };
            text.push_str(&format!("{u}\t{item}\t1\t{}\n", 1000 + t));
        }
    }
    std::fs::write(path, text).unwrap();
}
