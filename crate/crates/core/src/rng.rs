//! Seed fan-out.
//!
//! Every random quantity is drawn from a [`Stream`], a pair of a master seed
//! and a 64-bit stream id. The generator is ChaCha8 keyed by the master seed
//! with the ChaCha stream counter set to the id, so two streams never overlap
//! and a stream can be rebuilt from its two numbers alone.
//!
//! Stream ids are derived from `(purpose tag, index)` pairs with
//! [`stream_id`]: the tag is hashed with 64-bit FNV-1a, then combined with the
//! index through two rounds of the SplitMix64 finalizer. Child streams hash the
//! parent id into the tag hash, so the derivation is a pure function of the
//! path of tags and indices that leads to it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl Stream {
    pub fn new(master_seed: u64, purpose: &str, index: u64) -> Self {
        Self {
            master_seed,
            stream_id: stream_id(purpose, index),
        }
    }

    pub fn child(&self, purpose: &str, index: u64) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_id: splitmix64(self.stream_id ^ stream_id(purpose, index)),
        }
    }

    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn stream_id(purpose: &str, index: u64) -> u64 {
    splitmix64(fnv1a(purpose.as_bytes()) ^ splitmix64(index))
}
