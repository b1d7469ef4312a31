//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named streams so that unrelated consumers never share a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Negatives = 3,
    Augment = 4,
    Split = 5,
    Generate = 6,
    Index = 7,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed));
    rng.set_stream(stream as u64);
    rng
}

/// Per-item stream: the same `(seed, stream, a, b)` always yields the same
/// sequence regardless of which thread draws it.
pub fn derived(seed: u64, stream: Stream, a: u64, b: u64) -> Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ a) ^ b.wrapping_mul(0xA24B_AED4_963E_E407));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream as u64);
    rng
}
