//! Seeded counter-based random number generation.
//!
//! Every stochastic choice in this crate (synthetic teachers, parameter
//! initialization, random partitions, perturbation directions) flows through
//! [`CounterRng`] so that results are bit-reproducible across runs, threads,
//! and implementations in other languages.
//!
//! The generator is SplitMix64 evaluated in counter mode: draw `i` of a
//! stream seeded with `s` is
//!
//! ```text
//! mix64(s + (i + 1) * 0x9E3779B97F4A7C15)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer (xor-shift/multiply twice, final
//! xor-shift). Uniform doubles take the top 53 bits; normal variates use the
//! Box-Muller transform on pairs of uniforms.

/// Golden-ratio increment of SplitMix64.
const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 stream addressed by an explicit counter.
#[derive(Clone, Debug)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
    cached_normal: Option<f64>,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            counter: 0,
            cached_normal: None,
        }
    }

    /// Stream for one sample of a multi-sample job: `seed ^ sample_index`.
    /// Parallel and serial generation agree because each sample owns its
    /// stream.
    pub fn for_sample(seed: u64, sample_index: usize) -> Self {
        Self::new(seed ^ sample_index as u64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe as a logarithm argument.
    fn next_uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller; draws in pairs and caches the second.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        let u1 = self.next_uniform_open();
        let u2 = self.next_uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Uniform integer in `[0, bound)` by rejection; unbiased.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below bound must be positive");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Samples `k` distinct values from `[0, n)`, returned sorted.
    pub fn sample_distinct_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct values from {n}");
        // Floyd's algorithm keeps the draw count at exactly k.
        let mut chosen = Vec::with_capacity(k);
        for j in (n - k)..n {
            let t = self.next_below(j as u64 + 1) as usize;
            if chosen.contains(&t) {
                chosen.push(j);
            } else {
                chosen.push(t);
            }
        }
        chosen.sort_unstable();
        chosen
    }
}
