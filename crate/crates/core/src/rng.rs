//! Seeded random streams. Every consumer draws from its own ChaCha8 stream
//! of the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const THETA: u64 = 1;
pub const COMBINER: u64 = 2;
pub const SHUFFLE: u64 = 3;
pub const KMEANS: u64 = 4;
pub const RANDOM_MAPPING: u64 = 5;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
