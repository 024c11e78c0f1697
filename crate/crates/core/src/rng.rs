//! Seeded randomness.
//!
//! Every random artifact is produced from a [`Seed`]. Child seeds are derived
//! by mixing a parent seed with a stream label, so independent components
//! (inputs, labels, per-task draws, sweep points) never share a stream and
//! can be generated in any order or in parallel with identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Counter-based generator used throughout the crate.
pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

/// Named sub-streams, so call sites read as `seed.derive(stream::LABELS)`.
pub mod stream {
    pub const INPUTS: u64 = 1;
    pub const LABELS: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const SPEC: u64 = 4;
    pub const CLAMP: u64 = 5;
    pub const FRESH: u64 = 6;
    pub const TASKS: u64 = 7;
    pub const LAW: u64 = 8;
    pub const CORRUPT: u64 = 9;
    pub const POINT: u64 = 10;
    pub const DOMAIN: u64 = 11;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    /// Child seed for a labelled sub-stream.
    pub fn derive(self, label: u64) -> Seed {
        Seed(splitmix64(splitmix64(self.0) ^ splitmix64(label.wrapping_add(0xA5A5_A5A5))))
    }

    /// Child seed for a (label, index) pair, e.g. task `t` of a family.
    pub fn derive2(self, label: u64, index: u64) -> Seed {
        self.derive(label).derive(index)
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}
