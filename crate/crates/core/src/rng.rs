//! Reproducible random streams.
//!
//! Every path owns two ChaCha8 streams derived from the master seed: one for
//! Brownian increments and one for the jump ledger. ChaCha output is fully
//! specified, so identical `(seed, path)` pairs produce identical draws on
//! every platform and for every worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSpec {
    pub master_seed: u64,
}

impl RngSpec {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    /// Stream feeding the Brownian increments of `path`.
    pub fn brownian(&self, path: usize) -> ChaCha8Rng {
        self.stream(2 * path as u64)
    }

    /// Stream feeding the Poisson jump ledger of `path`.
    pub fn jumps(&self, path: usize) -> ChaCha8Rng {
        self.stream(2 * path as u64 + 1)
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(id);
        rng
    }

    /// Independent family of streams labelled by `tag`, e.g. for pilot runs
    /// or for the inner simulations of nested estimators.
    pub fn child(&self, tag: u64) -> RngSpec {
        RngSpec::new(splitmix64(self.master_seed ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d))))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
