//! Deterministic seed derivation.
//!
//! Every random stream in the crate is keyed by a tuple of integers
//! (run seed, box index, perturbation index, ...) so results never depend
//! on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a list of keys into one 64-bit seed.
pub fn derive(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn rng(keys: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(keys))
}

/// Standard normal sample (Box-Muller).
pub fn normal(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}
