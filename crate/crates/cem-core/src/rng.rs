//! Deterministic RNG streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! (master seed, purpose id), so adding or removing one consumer never shifts
//! the draws seen by another. This is what makes the null-configuration
//! equivalences (zero-strength attack, zero regularizer weight) bit-exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids, one per independent consumer.
pub mod purpose {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const ATTACK: u64 = 4;
    pub const SAMPLER: u64 = 5;
    pub const SEEDS: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const LABELS: u64 = 8;
    pub const VERIFY: u64 = 9;
}

/// ChaCha8 stream for (seed, purpose).
pub fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Standard normal draw.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}
