//! Seeded random streams. Every stochastic call site derives its own
//! ChaCha stream from a root seed and a tuple of indices, so results do not
//! depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a path of indices into one stream id.
pub fn stream_id(path: &[u64]) -> u64 {
    path.iter()
        .fold(0x5EED_u64, |acc, p| splitmix64(acc ^ splitmix64(*p)))
}

/// Generator for `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(path));
    rng
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
