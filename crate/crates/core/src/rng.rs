//! Deterministic random numbers.
//!
//! All randomness in the pipeline comes from [`Rng`], a ChaCha8 stream
//! cipher used as a counter-based generator. The raw `u64` stream for a
//! given seed is identical on every platform. Parallel tasks never share
//! an instance; they get an independent stream via [`Rng::derive`].

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Source of the random draws used by augmentation and sampling.
///
/// Implemented by [`Rng`]; tests substitute stubs that return fixed values.
pub trait Draws {
    /// Uniform on `[lo, hi)`.
    fn uniform(&mut self, lo: f64, hi: f64) -> f64;
    /// Gaussian with the given mean and standard deviation.
    fn normal(&mut self, mean: f64, std: f64) -> f64;
    /// `true` with probability `p`.
    fn bernoulli(&mut self, p: f64) -> bool;
    /// Uniform integer on `0..n`. `n` must be positive.
    fn below(&mut self, n: usize) -> usize;
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for sub-task `stream` of this seed.
    ///
    /// Depends only on the original seed and `stream`, never on how much of
    /// the parent stream has been consumed.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Chooses `k` distinct indices out of `0..n` uniformly, returned in
    /// ascending order. If `k >= n`, returns all of `0..n`.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        if k >= n {
            return (0..n).collect();
        }
        // partial Fisher-Yates
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        let mut chosen = pool[..k].to_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Reservoir selection (algorithm R) of `k` items from `0..n`, returned
    /// in ascending order. Single pass, one draw per item beyond the first `k`.
    pub fn reservoir(&mut self, n: usize, k: usize) -> Vec<usize> {
        if k >= n {
            return (0..n).collect();
        }
        let mut reservoir: Vec<usize> = (0..k).collect();
        for i in k..n {
            let j = self.below(i + 1);
            if j < k {
                reservoir[j] = i;
            }
        }
        reservoir.sort_unstable();
        reservoir
    }
}

impl Draws for Rng {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    fn normal(&mut self, mean: f64, std: f64) -> f64 {
        // Box-Muller; one variate per call keeps the draw count fixed.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        mean + std * radius * (std::f64::consts::TAU * u2).cos()
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // rejection sampling over the largest multiple of n
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }
}
