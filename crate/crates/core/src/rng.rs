//! Portable seeded randomness.
//!
//! Every random decision in the pipeline (splits, support sampling, parameter
//! initialisation) draws from SplitMix64 (Steele, Lea & Flood 2014): a 64-bit
//! counter advanced by `0x9E3779B97F4A7C15` and passed through a fixed
//! mixing function. The derived operations below are fully specified so that
//! an independent reimplementation reproduces the same draws:
//!
//! - `below(n)`: draw `x`; reject while `x < 2^64 mod n`; return `x mod n`.
//! - `unit_f64()`: `(x >> 11) * 2^-53`, uniform on `[0, 1)`.
//! - `partial_shuffle(items, k)`: forward Fisher-Yates; for `i` in `0..k`
//!   swap `items[i]` with `items[i + below(len - i)]`. The first `k` items are
//!   a uniform ordered draw without replacement.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

/// Domain tags mixed into user seeds so that independent consumers of the same
/// seed do not draw correlated streams.
pub mod domain {
    pub const SPLIT: u64 = 0x5350_4c49_5400_0001;
    pub const SUPPORT: u64 = 0x5355_5050_4f52_0002;
    pub const INIT: u64 = 0x494e_4954_0000_0003;
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Seed for a named consumer: `seed XOR tag`.
    pub fn for_domain(seed: u64, tag: u64) -> Self {
        Self::new(seed ^ tag)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[-bound, bound)`.
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.unit_f64() - 1.0) * bound
    }

    pub fn partial_shuffle<T>(&mut self, items: &mut [T], k: usize) {
        let len = items.len();
        for i in 0..k.min(len) {
            let j = i + self.below((len - i) as u64) as usize;
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_stream() {
        // Seed 1234567, cross-checked against a standalone transcription of splitmix64.c.
        let mut rng = SeededRng::new(1234567);
        let expected = [
            6457827717110365317u64,
            3203168211198807973,
            9817491932198370423,
            4593380528125082431,
            16408922859458223821,
        ];
        for e in expected {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = SeededRng::new(7);
        for n in 1..50u64 {
            for _ in 0..20 {
                assert!(rng.below(n) < n);
            }
        }
    }

    #[test]
    fn partial_shuffle_is_a_permutation() {
        let mut rng = SeededRng::new(3);
        let mut v: Vec<u32> = (0..17).collect();
        rng.partial_shuffle(&mut v, 5);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..17).collect::<Vec<_>>());
    }
}
