//! Seeded, splittable random streams.
//!
//! Every stochastic operation takes an explicit RNG. Streams for a given
//! (seed, record, epoch) triple are derived by hashing, so the draw order of
//! one record never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Seed for the per-record stream `hash(seed, record id, epoch)`.
pub fn stream_seed(seed: u64, record_id: &str, epoch: u64) -> u64 {
    mix64(
        mix64(seed ^ fnv1a(record_id.as_bytes()))
            ^ mix64(epoch.wrapping_add(0x5851_F42D_4C95_7F2D)),
    )
}

pub fn record_stream(seed: u64, record_id: &str, epoch: u64) -> Rng {
    seeded(stream_seed(seed, record_id, epoch))
}

/// Derives an independent child seed from a parent seed and a tag.
pub fn derive(seed: u64, tag: &str) -> u64 {
    mix64(seed ^ fnv1a(tag.as_bytes()))
}
