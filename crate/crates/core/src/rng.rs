//! Portable pseudo-random numbers.
//!
//! Every random decision in the crate (scene sampling, parameter init, batch
//! assembly, condition dropout, token sampling) flows through [`SplitMix64`],
//! so datasets and checkpoints are reproducible across platforms and across
//! reimplementations. The generator is the standard SplitMix64:
//!
//! ```text
//! state = state + 0x9E3779B97F4A7C15            (wrapping)
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (wrapping)
//! return z ^ (z >> 31)
//! ```
//!
//! Derived quantities:
//! - `below(n)`: draw `x = next_u64()`, reject while `x < (2^64 - n) mod n`,
//!   return `x mod n` (unbiased).
//! - `next_f64()`: `(next_u64() >> 11) * 2^-53`, uniform in `[0, 1)`.
//! - `normal()`: Box-Muller on two `next_f64()` draws, `u1` mapped to `1 - u1`
//!   so the logarithm never sees zero; one draw pair per normal (no caching).

/// SplitMix64 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Generator for a labelled sub-stream, e.g. `(run_seed, step, sample)`.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        let mut h = SplitMix64::new(seed);
        let mut acc = h.next_u64();
        for &p in parts {
            h = SplitMix64::new(acc ^ p.wrapping_mul(GOLDEN));
            acc = h.next_u64();
        }
        SplitMix64::new(acc)
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
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

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle driven by `below`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
