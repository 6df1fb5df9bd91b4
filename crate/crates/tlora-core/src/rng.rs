//! Seeded randomness with deterministic per-component derivation.
//!
//! Every random stream in a run is a [`ChaCha8Rng`] seeded with
//! `run_seed + fnv1a64(component_name)`, so adding or reordering components
//! never perturbs the streams of existing ones. Component names are stable
//! strings such as `"model"`, `"adapter/layer0.q"` or `"shuffle/epoch7"`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// FNV-1a over the UTF-8 bytes of `name`. Stable across platforms and runs.
pub fn stable_hash(name: &str) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for byte in name.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Derived seed for a named component of a run.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    seed.wrapping_add(stable_hash(component))
}

/// Generator for a named component, seeded via [`derive_seed`].
pub fn component_rng(seed: u64, component: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, component))
}

/// `n` samples from N(0, std²).
pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Kaiming (He) normal standard deviation: sqrt(2 / fan_in).
pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
