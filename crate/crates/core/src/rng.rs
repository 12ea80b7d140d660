//! Seeded random numbers shared by every generator in the crate.
//!
//! The stream is xoshiro256++ seeded through SplitMix64 (`seed_from_u64`).
//! Derived draws are defined here rather than delegated to `rand_distr` so the
//! exact sequence can be reproduced in another language:
//!
//! * uniform `[0,1)`: `(next_u64 >> 11) * 2^-53`
//! * standard normal: Box–Muller on `u1 = 1 - uniform`, `u2 = uniform`;
//!   the cosine branch is returned first and the sine branch is cached
//! * integer below `n`: rejection on the top bits, see [`SeededRng::below`]
//!
//! Normals go through `ln`, `sqrt`, `cos` and `sin`, so bit-identical streams
//! across platforms additionally require the same libm.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { inner: Xoshiro256PlusPlus::seed_from_u64(seed), spare: None }
    }

    /// Independent stream for a sub-task, e.g. the noise of an instance.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = std::f64::consts::TAU * u2;
        self.spare = Some(r * t.sin());
        r * t.cos()
    }

    /// Normal with standard deviation `std`, redrawn until within `cut` stds.
    pub fn truncated_normal(&mut self, std: f64, cut: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= cut {
                return std * z;
            }
        }
    }

    /// Uniform integer in `[0, n)`. Draws the top `k` bits with `2^k >= n`
    /// and rejects values `>= n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        if n == 1 {
            return 0;
        }
        let bits = 64 - (n - 1).leading_zeros();
        loop {
            let v = self.next_u64() >> (64 - bits);
            if v < n {
                return v;
            }
        }
    }

    /// Fisher–Yates, from the last index down.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// `k` distinct values from `[0, n)`: a partial Fisher–Yates over a
    /// sparse swap map, so memory is O(k) even for large `n`.
    pub fn sample_distinct(&mut self, n: u64, k: usize) -> Vec<u64> {
        assert!(k as u64 <= n);
        let mut swapped = std::collections::HashMap::new();
        let mut out = Vec::with_capacity(k);
        for i in 0..k as u64 {
            let j = i + self.below(n - i);
            let vj = *swapped.get(&j).unwrap_or(&j);
            let vi = *swapped.get(&i).unwrap_or(&i);
            swapped.insert(j, vi);
            out.push(vj);
        }
        out
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = SeededRng::new(1);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = SeededRng::new(3);
        let n = 200_000;
        let xs = r.normal_vec(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn truncated_normal_stays_inside() {
        let mut r = SeededRng::new(5);
        for _ in 0..10_000 {
            assert!(r.truncated_normal(0.02, 2.0).abs() <= 0.04);
        }
    }

    #[test]
    fn sample_distinct_is_distinct_and_in_range() {
        let mut r = SeededRng::new(11);
        let mut v = r.sample_distinct(50, 50);
        v.sort();
        assert_eq!(v, (0..50).collect::<Vec<_>>());
        let w = r.sample_distinct(1_000_000, 300);
        let set: std::collections::HashSet<_> = w.iter().collect();
        assert_eq!(set.len(), 300);
        assert!(w.iter().all(|&x| x < 1_000_000));
    }

    #[test]
    fn below_covers_range() {
        let mut r = SeededRng::new(2);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[r.below(7) as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }
}
