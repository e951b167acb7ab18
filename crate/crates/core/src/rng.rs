//! Seeded randomness for every stochastic component in the crate.
//!
//! All randomness flows through [`SeedStream`], a ChaCha8 counter-based
//! generator plus a Box-Muller transform for Gaussians. The generator, the
//! u64-to-f64 conversion, and the shuffle are fixed here so that a given seed
//! produces the same byte-for-byte results on every run; the determinism
//! tests freeze that contract.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer, used to derive independent sub-seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a base seed and a salt.
///
/// Distinct salts give statistically independent streams for the same base
/// seed (layer init, per-epoch shuffles, per-sample augmentation, ...).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    splitmix64(base ^ splitmix64(salt))
}

/// Derives a sub-seed from a base seed and several salt components.
pub fn derive_seed_n(base: u64, salts: &[u64]) -> u64 {
    salts.iter().fold(base, |acc, &s| derive_seed(acc, s))
}

/// Deterministic random stream: ChaCha8 core + Box-Muller normals.
#[derive(Clone, Debug)]
pub struct SeedStream {
    rng: ChaCha8Rng,
    cached_normal: Option<f64>,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased uniform integer in [0, n). Panics if n == 0.
    pub fn uniform_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "uniform_below(0)");
        // rejection sampling on the top range to avoid modulo bias
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }

    /// Standard normal via the Box-Muller transform (polar form not used;
    /// the trigonometric form consumes exactly two uniforms per pair).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] so that ln(u1) is finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
