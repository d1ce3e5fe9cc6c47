//! Seeded randomness.
//!
//! All randomness flows through [`RngState`], a ChaCha8 stream cipher keyed by
//! a 64-bit seed and a 64-bit stream id. ChaCha is counter based, so a state is
//! fully described by `(seed, stream, counter)` and draws are identical across
//! runs and platforms. Gaussian draws use the ziggurat sampler from
//! `rand_distr`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numeric::Matrix;

/// Well-known stream tags so that independent consumers of one master seed
/// never share a stream.
pub mod streams {
    pub const DATASET: u64 = 0x6461_7461;
    pub const REFERENCE: u64 = 0x7265_6665;
    pub const INIT: u64 = 0x696e_6974;
    pub const TRAIN: u64 = 0x7472_6169;
    pub const LAPLACE_FIT: u64 = 0x6669_7368;
    pub const LAPLACE_DRAW: u64 = 0x6472_6177;
    pub const SAMPLING: u64 = 0x7365_6564;
    pub const BASELINE: u64 = 0x6261_7365;
    pub const PROJECTION: u64 = 0x7072_6f6a;
    pub const CONDITION: u64 = 0x636f_6e64;
}

#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Rebuilds a state from its persisted coordinates.
    pub fn resume(seed: u64, stream: u64, counter: u64) -> Self {
        let mut s = Self::with_stream(seed, stream);
        s.inner.set_word_pos(u128::from(counter));
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Independent child stream identified by `tag`. Does not advance `self`.
    pub fn fork(&self, tag: u64) -> RngState {
        RngState::with_stream(splitmix64(self.seed ^ splitmix64(self.stream)), tag)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_vec(&mut self, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| self.standard_normal()).collect()
    }

    /// `n × dim` matrix of independent standard normal draws, filled row by row.
    pub fn gaussian_sample(&mut self, n: usize, dim: usize) -> Matrix {
        let data = (0..n * dim).map(|_| self.standard_normal()).collect();
        Matrix::from_vec(n, dim, data).expect("shape is consistent by construction")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// SplitMix64 finalizer, used to derive child seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_state_same_draws() {
        let mut a = RngState::new(7);
        let mut b = RngState::new(7);
        assert_eq!(a.gaussian_sample(5, 3), b.gaussian_sample(5, 3));
    }

    #[test]
    fn different_seeds_differ() {
        let a = RngState::new(1).gaussian_sample(4, 2);
        let b = RngState::new(2).gaussian_sample(4, 2);
        assert_ne!(a, b);
    }

    #[test]
    fn sampling_advances_counter() {
        let mut r = RngState::new(3);
        let c0 = r.counter();
        r.gaussian_sample(10, 2);
        assert!(r.counter() > c0);
    }

    #[test]
    fn resume_continues_the_stream() {
        let mut r = RngState::with_stream(11, 4);
        r.gaussian_sample(3, 3);
        let mut resumed = RngState::resume(r.seed(), r.stream(), r.counter());
        assert_eq!(r.normal_vec(8), resumed.normal_vec(8));
    }

    #[test]
    fn moments_of_large_sample() {
        // 4 sigma bounds: mean sd = 1/sqrt(n) ~ 0.0032, var sd = sqrt(2/n) ~ 0.0045.
        let n = 100_000;
        let m = RngState::new(0).gaussian_sample(n, 2);
        for c in 0..2 {
            let col: Vec<f64> = (0..n).map(|i| m.get(i, c)).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.02, "mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "var {var}");
        }
    }

    #[test]
    fn forks_are_independent_of_parent_position() {
        let mut parent = RngState::new(5);
        let f1 = parent.fork(9).normal_vec(4);
        parent.normal_vec(100);
        let f2 = parent.fork(9).normal_vec(4);
        assert_eq!(f1, f2);
        assert_ne!(f1, parent.fork(10).normal_vec(4));
    }

    #[test]
    fn choose_indices_distinct() {
        let mut r = RngState::new(1);
        let mut idx = r.choose_indices(50, 20);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 20);
    }
}
