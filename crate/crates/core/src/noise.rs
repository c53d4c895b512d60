//! Seeded, counter-addressed noise streams.
//!
//! Every random draw in the engine comes from a [`NoiseStream`] addressed by
//! `(seed, purpose, index)`. Two runs that ask for the same address consume
//! identical numbers, which is what makes joint and control-wise training
//! curves comparable update by update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for. Distinct purposes never share numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    /// Rollout noise for gradient update `index`.
    Training = 1,
    /// Evaluation sampling, chunk `index`.
    Evaluation = 2,
    /// Network weight initialisation.
    Init = 3,
    /// Dataset generation.
    Data = 4,
    /// Minibatch and diffusion-time draws for score/classifier training.
    Minibatch = 5,
    /// Agent sweep permutations in control-wise training.
    Schedule = 6,
}

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, purpose: Purpose, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // 8 bits of purpose, 56 bits of index.
        rng.set_stream(((purpose as u64) << 56) | (index & ((1u64 << 56) - 1)));
        Self { rng }
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.normal();
        }
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
