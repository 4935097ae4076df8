//! Seeded pseudo-random source used for weight init, synthetic data and tests.
//!
//! Backed by PCG-XSH-RR 64/32 (`rand_pcg::Pcg32`): 64-bit state, 32-bit
//! output, stable across platforms and releases.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_pcg::Pcg32;

use crate::tensor::{Element, Tensor};

#[derive(Clone)]
pub struct Rng(Pcg32);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng(Pcg32::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    /// Normal with standard deviation `std`, redrawn until within two deviations.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn normal_tensor<T: Element>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.normal() * std)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn uniform_tensor<T: Element>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.range(lo, hi))).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
