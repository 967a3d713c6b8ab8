//! Seeded random streams.
//!
//! Every consumer of randomness owns a stream derived from the run seed and a
//! short path of integer tags (step, group, member, ...). Streams never share
//! state, so results do not depend on the order in which work is executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// Domain tags that keep streams for different purposes apart.
pub mod tag {
    pub const QUESTION: u64 = 1;
    pub const MEMBER: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const RETRY: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const SYNTH: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
