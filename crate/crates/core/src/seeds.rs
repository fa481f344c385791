//! Deterministic seed fan-out.
//!
//! A single global seed is split into independent named streams so that one
//! component can be re-seeded without disturbing the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeds at or above this value are reserved for evaluation instances.
pub const EVAL_SEED_BASE: u64 = 1 << 63;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with an integer stream id.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named streams derived from one global seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedSplitter {
    global: u64,
}

impl SeedSplitter {
    pub fn new(global: u64) -> Self {
        SeedSplitter { global }
    }

    pub fn global(&self) -> u64 {
        self.global
    }

    pub fn seed(&self, name: &str) -> u64 {
        derive_seed(self.global, fnv1a(name))
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(name))
    }

    /// Training-instance seed, always below [`EVAL_SEED_BASE`].
    pub fn train_instance_seed(&self, index: u64) -> u64 {
        derive_seed(self.seed("env"), index) & !EVAL_SEED_BASE
    }
}

/// Seed of the `i`-th evaluation instance. Disjoint from every training seed.
pub fn eval_instance_seed(eval_seed: u64, i: u64) -> u64 {
    EVAL_SEED_BASE | (eval_seed.wrapping_add(i) & !EVAL_SEED_BASE)
}
