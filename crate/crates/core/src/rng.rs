// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded counter-based random streams.
//!
//! A [`Rng`] is only a seed. Every consumer asks for a [`Substream`] by index;
//! substream `i` is the ChaCha keystream for `(seed, i)`, so the values it
//! yields do not depend on which other substreams were drawn before it or on
//! which thread draws it.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, index: u64) -> Substream {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(index);
        Substream { inner }
    }
}

#[derive(Debug, Clone)]
pub struct Substream {
    inner: ChaCha8Rng,
}

impl Substream {
    /// Tensor of i.i.d. standard normal entries.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let inner = &mut self.inner;
        Tensor::from_fn(shape, |_| StandardNormal.sample(inner))
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw on `[lo, hi)`; returns `lo` when the interval is empty.
    /// Always consumes one draw so later values keep their stream position.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.inner.random::<f64>();
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * u
    }

    /// Always consumes one draw, like [`Substream::uniform`].
    pub fn bernoulli(&mut self, p: f64) -> bool {
        let u = self.inner.random::<f64>();
        u < p
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// Convenience wrapper: a gaussian tensor from substream `index` of `rng`.
pub fn gaussian_sample(rng: &Rng, index: u64, shape: &[usize]) -> Tensor {
    rng.substream(index).gaussian(shape)
}
