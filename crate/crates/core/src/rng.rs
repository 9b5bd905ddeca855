//! Deterministic random tensors.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) keyed with
//! `SeedableRng::seed_from_u64(seed)` and positioned on a 64-bit stream id.
//! Every draw consumes whole `u64` words:
//!
//! * uniform `[0, 1)`: `(word >> 11) as f64 * 2^-53`
//! * normal: Box–Muller on two uniforms `u1, u2`, using `1 - u1` so the
//!   logarithm never sees zero; `r = sqrt(-2 ln(1 - u1))` and the pair
//!   `(r cos 2πu2, r sin 2πu2)` is emitted in that order.
//!
//! Transcendentals come from `libm` rather than the platform math library so
//! that the same seed yields the same bits on every target.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::Tensor;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// A seeded stream of uniform and normal variates.
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sub-stream of `seed`; used to split one run seed into
    /// per-purpose generators (init, latent draws, batching, ...).
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng {
            inner,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(1.0 - u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Uniform integer in `0..n`. Uses rejection to stay unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|x| *x = self.normal());
        t
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = self.uniform_range(lo, hi));
        t
    }
}

/// Standard normal tensor determined entirely by `(shape, seed)`.
pub fn rng_normal(shape: &[usize], seed: u64) -> Tensor {
    SeededRng::new(seed).normal_tensor(shape)
}

/// Child seed for the `index`-th use of `purpose` under `seed`.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    SeededRng::with_stream(seed ^ purpose, index).next_u64()
}

/// Uniform `[lo, hi)` tensor determined entirely by `(shape, seed)`.
pub fn rng_uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    SeededRng::new(seed).uniform_tensor(shape, lo, hi)
}
