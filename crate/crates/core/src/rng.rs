//! Seeded random streams.
//!
//! Every stochastic step draws from xoshiro256++ (a 64-bit xorshift-family
//! generator) whose 256-bit state is expanded from a `u64` seed with
//! SplitMix64. The stream is identical on every platform.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256PlusPlus as Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for item `index` of a run seeded with `seed`.
pub fn derived(seed: u64, index: u64) -> Rng {
    seeded(seed ^ index)
}
