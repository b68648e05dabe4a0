//! Seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! pure function of a base seed and the identity of the thing being sampled
//! (problem id, prefix content, worker, candidate index). Results therefore do
//! not depend on scheduling order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the stream seed for `(seed, stream)`; used for per-worker,
/// per-candidate and per-rollout streams alike.
pub fn split(seed: u64, stream: u64) -> u64 {
    mix(seed ^ mix(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 64-bit FNV-1a over raw bytes. Stable across platforms and toolchains,
/// unlike `std::hash::DefaultHasher`.
#[derive(Debug, Clone, Copy)]
pub struct StableHasher(u64);

impl Default for StableHasher {
    fn default() -> Self {
        StableHasher(0xCBF2_9CE4_8422_2325)
    }
}

impl StableHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> &mut Self {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01B3);
        }
        self
    }

    pub fn u64(&mut self, value: u64) -> &mut Self {
        self.bytes(&value.to_le_bytes())
    }

    pub fn i64(&mut self, value: i64) -> &mut Self {
        self.bytes(&value.to_le_bytes())
    }

    pub fn str(&mut self, value: &str) -> &mut Self {
        self.u64(value.len() as u64).bytes(value.as_bytes())
    }

    pub fn finish(&self) -> u64 {
        mix(self.0)
    }
}

pub fn hash_str(value: &str) -> u64 {
    StableHasher::new().str(value).finish()
}
