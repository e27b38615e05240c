//! Seeded, counter-based randomness.
//!
//! Every stochastic operation takes a [`Seed`]. Independent streams are split
//! off with [`Seed::derive`], which hashes `(seed, stream)` with SplitMix64, so
//! the value drawn for trial `i` never depends on how many other trials ran
//! before it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub const fn new(value: u64) -> Self {
        Seed(value)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Child seed for stream `stream`.
    pub fn derive(self, stream: u64) -> Seed {
        Seed(splitmix64(
            self.0 ^ splitmix64(stream.wrapping_add(0xA076_1D64_78BD_642F)),
        ))
    }

    /// Child seed along a path of stream ids.
    pub fn derive_path(self, path: &[u64]) -> Seed {
        path.iter().fold(self, |s, &p| s.derive(p))
    }

    /// A ChaCha8 generator for bulk sampling from this seed.
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Uniform value in `[0, 1)` at position `counter` of this seed's stream.
    pub fn unit_at(self, counter: u64) -> f64 {
        let bits = splitmix64(self.derive(counter).0);
        (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl From<u64> for Seed {
    fn from(value: u64) -> Self {
        Seed(value)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
