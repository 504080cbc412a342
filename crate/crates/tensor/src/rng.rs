//! Seeded sample streams.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded through
//! `SeedableRng::seed_from_u64`, whose output stream is fixed across
//! platforms and crate versions. The float transforms on top of it are
//! defined here and are part of the frozen contract:
//!
//! * `uniform01`: `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `standard_normal`: the ziggurat sampler of `rand_distr::StandardNormal`
//!   drawing from the same ChaCha8 stream. `rand_distr` is pinned to an exact
//!   version because its samplers may change between minor releases.
//! * `trunc_normal(std)`: standard normal redrawn until `|z| <= 2`, scaled by `std`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.standard_normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Uniform index in `0..n` by 128-bit multiply-shift.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Independent child stream derived from this generator's next output.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}
