//! Deterministic seeding. Every random draw in the pipeline flows from a
//! single run seed plus a named stream, so reruns are byte-identical.

use crate::numerics::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8], basis: u64) -> u64 {
    let mut h = basis;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG keyed by `(seed, stream)`; distinct stream names give independent draws.
pub fn seeded_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let h1 = fnv1a(stream.as_bytes(), 0xcbf2_9ce4_8422_2325);
    let h2 = fnv1a(stream.as_bytes(), 0x6c62_272e_07bb_0142);
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&h1.to_le_bytes());
    key[16..24].copy_from_slice(&h2.to_le_bytes());
    key[24..32].copy_from_slice(&(seed ^ h1.rotate_left(32)).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Standard normal draw via Box-Muller, computed in f64.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Tensor of i.i.d. `N(0, std²)` values.
pub fn randn_tensor<S: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(normal(rng) * std))
}
