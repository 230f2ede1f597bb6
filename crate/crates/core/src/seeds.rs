//! Deterministic RNG stream derivation.
//!
//! Every random decision in a run is drawn from a stream keyed by
//! `(run_seed, domain tag, indices...)`, so task generation, inner loops,
//! and prior-model subsets are reproducible independent of execution
//! order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated streams apart.
pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const TASK: u64 = 0x02;
    pub const EVAL: u64 = 0x03;
    pub const PRIOR: u64 = 0x04;
    pub const NOISE: u64 = 0x05;
    pub const BATCH: u64 = 0x06;
}

/// Mix a list of words into a single seed (splitmix64 finalizer chain).
pub fn mix(parts: &[u64]) -> u64 {
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        state ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(state << 6);
        state = splitmix(state);
    }
    state
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the stream identified by `parts`.
pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Standard normal draw (Marsaglia polar method, one value per call).
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    loop {
        let u = rng.gen_range(-1.0..1.0);
        let v = rng.gen_range(-1.0..1.0);
        let s: f64 = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}
