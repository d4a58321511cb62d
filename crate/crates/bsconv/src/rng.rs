//! Deterministic random fixtures.
//!
//! Every random draw in the crate flows through [`SeededRng`], a thin wrapper
//! around the stream-capable ChaCha8 generator. ChaCha output is specified
//! byte-for-byte independent of platform, so the same `(seed, stream)` pair
//! yields the same tensors everywhere, which is what the oracle tests and the
//! training determinism contract rely on.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, ShapeError, Tensor};

/// Seedable, platform-independent generator (ChaCha8 with 64-bit streams).
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream of the same seed. Used to decouple e.g. blueprint
    /// init draws from weight init draws so adding one does not shift the other.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { inner }
    }

    /// Standard normal draw in f64.
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn uniform_usize(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// Fill a tensor with `N(0, std^2)` draws in ascending index order.
    pub fn fill_normal<S: Scalar>(&mut self, tensor: &mut Tensor<S>, std: f64) {
        for x in tensor.data_mut() {
            *x = S::from_f64(self.normal() * std);
        }
    }
}

/// Tensor of `N(0, std^2)` samples. Same `(shape, seed, std)` gives identical
/// bytes on every platform. `std` must be > 0.
pub fn random_normal<S: Scalar>(
    shape: &[usize],
    seed: u64,
    std: f64,
) -> Result<Tensor<S>, ShapeError> {
    assert!(std > 0.0, "random_normal: std must be > 0, got {std}");
    let mut tensor = Tensor::zeros(shape)?;
    SeededRng::new(seed).fill_normal(&mut tensor, std);
    Ok(tensor)
}
