//! Deterministic pseudo-random generation: a splitmix64 stream feeding a
//! Box-Muller normal generator.
//!
//! All transcendental calls go through `libm` so the value sequence for a seed
//! is bit-identical across platforms, which the checkpoint and test
//! reproducibility guarantees rely on.

use crate::tensor::{Scalar, Tensor};

const TWO_PI: f64 = std::f64::consts::TAU;

/// Seed-derived 64-bit generator state.
#[derive(Clone, Debug)]
pub struct Prng {
    state: u64,
    cached_normal: Option<f64>,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            cached_normal: None,
        }
    }

    /// Derives an independent stream, e.g. one per parameter tensor.
    pub fn fork(&mut self, tag: u64) -> Prng {
        let mix = self.next_u64() ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Prng::new(mix)
    }

    /// splitmix64 step.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        // 53 mantissa bits; +1 keeps the value strictly positive for ln().
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / (9_007_199_254_740_992.0 + 1.0))
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform draw in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Standard normal draw (Box-Muller, pairs cached).
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.next_uniform();
        let u2 = self.next_uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let (s, c) = (libm::sin(TWO_PI * u2), libm::cos(TWO_PI * u2));
        self.cached_normal = Some(r * s);
        r * c
    }

    /// Tensor of i.i.d. standard normal draws in deterministic order.
    pub fn randn<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(self.next_normal()))
    }

    /// Truncated normal: standard draws rejected outside [-2, 2], then scaled.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| {
            let mut z = self.next_normal();
            while z.abs() > 2.0 {
                z = self.next_normal();
            }
            T::from_f64(z * std)
        })
    }

    /// Deterministic in-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}
