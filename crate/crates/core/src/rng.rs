//! Seeded ChaCha streams. Every consumer draws from its own stream id so
//! that, e.g., data shuffling can never shift parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids reserved per purpose.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const LATENT: u64 = 2;
    pub const EPSILON: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const PERTURB: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const RESAMPLE: u64 = 8;
    pub const GENERATE: u64 = 9;
    pub const EXTRACTOR: u64 = 10;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a seed with an index into a derived seed (splitmix64 finalizer).
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
