//! Deterministic keyed random streams.
//!
//! Every consumer of randomness in a run (dataset generation, partitioning,
//! per-client weight init, minibatch sampling, uplink/downlink channel noise,
//! final evaluation) derives its own stream from a master seed plus a key of
//! salts. Streams are independent by construction, so results never depend on
//! execution schedule or on whether an unrelated component drew from its
//! stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Salts naming each independent consumer of randomness.
pub mod salt {
    pub const DATASET: u64 = 0x01;
    pub const PARTITION: u64 = 0x02;
    pub const ENCODER_INIT: u64 = 0x03;
    pub const DECODER_INIT: u64 = 0x04;
    pub const SCG_INIT: u64 = 0x05;
    pub const BATCH: u64 = 0x06;
    pub const UPLINK: u64 = 0x07;
    pub const DOWNLINK: u64 = 0x08;
    pub const EVAL: u64 = 0x09;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a key of salts into a single 64-bit value.
pub fn mix(seed: u64, key: &[u64]) -> u64 {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &part in key {
        state ^= part.wrapping_mul(0xff51afd7ed558ccd);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Derives an independent ChaCha stream for the given (seed, key) pair.
pub fn stream(seed: u64, key: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed, key);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
