//! Seeded random streams.
//!
//! One 64-bit run seed fans out into independent ChaCha streams selected by
//! a label and an index, so each consumer draws from its own sequence no
//! matter how work is scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Generator for stream `(label, index)` under `seed`.
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    rng
}

/// A child seed for a named consumer.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    stream(seed, label, 0).next_u64()
}
