//! Deterministic seed derivation so per-image streams do not depend on
//! iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes mixed into derived seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    ImageView = 2,
    TransformedView = 3,
    TransformChoice = 4,
    Negatives = 5,
    HeadShuffle = 6,
    Init = 7,
    Bank = 8,
    Probe = 9,
    Histogram = 10,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of a run seed and an ordered list of coordinates.
pub fn derive(seed: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &p in parts {
        h = splitmix(h ^ p);
    }
    h
}

pub fn rng(seed: u64, stream: Stream, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, parts))
}
