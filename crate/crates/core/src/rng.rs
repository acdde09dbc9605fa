//! Deterministic RNG stream derivation.
//!
//! Every random draw in a simulation comes from a ChaCha stream keyed by
//! `(master_seed, phase, round, client)`, so client work can run in any
//! order or in parallel without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Simulation phase a stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Phase {
    Init = 1,
    Train = 2,
    Noise = 3,
    Unlearn = 4,
    UnlearnNoise = 5,
    Shadow = 6,
    Theory = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the stream coordinates into a single 64-bit key.
pub fn stream_key(master_seed: u64, phase: Phase, round: u64, client: u64) -> u64 {
    let mut h = splitmix64(master_seed);
    for word in [phase as u64, round, client] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn stream(master_seed: u64, phase: Phase, round: u64, client: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(master_seed, phase, round, client))
}

/// A plain seeded generator for one-shot operations (dataset generation, splits).
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
