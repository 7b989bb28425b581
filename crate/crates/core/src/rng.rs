//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent stream for one image: `seed ^ stable_hash(image_id)`.
pub fn image_stream(seed: u64, image_id: &str) -> Rng {
    seeded(image_seed(seed, image_id))
}

pub fn image_seed(seed: u64, image_id: &str) -> u64 {
    seed ^ stable_hash(image_id)
}
