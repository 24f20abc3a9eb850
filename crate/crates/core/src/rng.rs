//! Seeded randomness.
//!
//! Every random draw in a run comes from a [`SplitMix64`] generator whose seed
//! is derived from one root seed and a stream name (plus optional indices such
//! as client id and epoch). Streams are independent of each other, so adding a
//! draw to one never perturbs another.

use std::collections::BTreeMap;

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

/// Named streams used by the protocols.
pub mod stream {
    pub const INIT: &str = "init";
    pub const PARTITION: &str = "partition";
    pub const VISIT_ORDER: &str = "visit-order";
    pub const SHUFFLE: &str = "shuffle";
    pub const BATCH_ORDER: &str = "batch-order";
    pub const DATA: &str = "data";
    pub const EVAL_PARTITION: &str = "eval-partition";
    pub const AUGMENT: &str = "augment";
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Derives named, indexed seeds from a root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    root: u64,
}

impl SeedStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn seed(&self, name: &str, index: &[u64]) -> u64 {
        let mut s = mix(self.root.wrapping_add(GOLDEN) ^ fnv1a(name));
        for &i in index {
            s = mix(s.wrapping_add(GOLDEN).wrapping_add(i));
        }
        s
    }

    pub fn rng(&self, name: &str, index: &[u64]) -> SplitMix64 {
        SplitMix64::seed_from_u64(self.seed(name, index))
    }

    /// Base seed of every named stream, for the run report.
    pub fn manifest(&self) -> BTreeMap<String, u64> {
        [
            stream::INIT,
            stream::PARTITION,
            stream::VISIT_ORDER,
            stream::SHUFFLE,
            stream::BATCH_ORDER,
            stream::DATA,
            stream::EVAL_PARTITION,
            stream::AUGMENT,
        ]
        .iter()
        .map(|name| (name.to_string(), self.seed(name, &[])))
        .collect()
    }
}
