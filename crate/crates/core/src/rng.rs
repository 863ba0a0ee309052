//! Counter-based deterministic random number generator.
//!
//! Every stream is a pure function of a 64-bit `key` and a 64-bit draw
//! counter, so any language can reproduce it bit-exactly:
//!
//! ```text
//! word(n)   = mix64(key + (n + 1) * 0x9E3779B97F4A7C15)        (wrapping)
//! mix64(z)  : z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//!             z ^= z >> 27; z *= 0x94D049BB133111EB;
//!             z ^= z >> 31                                      (wrapping)
//! ```
//!
//! `mix64` is the SplitMix64 finalizer, so a stream with key `k` equals the
//! output sequence of SplitMix64 seeded with `k`. Derived values:
//!
//! ```text
//! f64(n)    = (word(n) >> 11) * 2^-53                           in [0, 1)
//! gauss     = Box-Muller over two consecutive draws:
//!             r = sqrt(-2 ln((w0 >> 11) + 1) / 2^53)
//!             z = r * cos(2 pi * f(w1))
//! substream(seed, index): key = mix64(seed) ^ mix64(index + 0x9E3779B97F4A7C15)
//! ```
//!
//! The `u64` and `[0,1)` streams are exactly reproducible on any IEEE-754
//! platform; the Gaussian values additionally depend on the platform's
//! `ln`/`cos`, which agree to the last few ulps in practice.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based generator; `Copy` so call sites can fork read-only.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    /// Stream with `key = seed` starting at draw 0.
    pub fn new(seed: u64) -> Self {
        Self {
            key: seed,
            counter: 0,
        }
    }

    /// Independent substream for one sample of a seeded collection.
    pub fn substream(seed: u64, index: u64) -> Self {
        Self {
            key: mix64(seed) ^ mix64(index.wrapping_add(GOLDEN)),
            counter: 0,
        }
    }

    /// Same stream repositioned at an absolute draw counter. Lets per-pixel
    /// consumers draw in parallel without sharing mutable state.
    pub fn at(self, counter: u64) -> Self {
        Self {
            key: self.key,
            counter,
        }
    }

    /// Draws the next 64-bit word.
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in `[0, 1)` with 53 significant bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let v = (self.next_f64() * n as f64) as usize;
        v.min(n - 1)
    }

    /// Standard normal draw (Box-Muller, consumes two words).
    pub fn next_gauss(&mut self) -> f64 {
        let w0 = self.next_u64();
        let w1 = self.next_u64();
        // (w0 >> 11) + 1 keeps the log argument in (0, 1].
        let u0 = ((w0 >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u1 = (w1 >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u0.ln()).sqrt() * (2.0 * std::f64::consts::PI * u1).cos()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = CounterRng::new(42);
        let mut b = CounterRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn counter_positioning_matches_sequential_draws() {
        let mut seq = CounterRng::new(7);
        let base = CounterRng::new(7);
        let drawn: Vec<u64> = (0..16).map(|_| seq.next_u64()).collect();
        for (i, expect) in drawn.iter().enumerate() {
            let mut jumped = base.at(i as u64);
            assert_eq!(jumped.next_u64(), *expect);
        }
    }

    #[test]
    fn substreams_differ_per_index_and_seed() {
        let mut a = CounterRng::substream(7, 0);
        let mut b = CounterRng::substream(7, 1);
        let mut c = CounterRng::substream(8, 0);
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
        assert_ne!(y, z);
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = CounterRng::new(3);
        for _ in 0..1000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn gauss_moments_are_plausible() {
        let mut rng = CounterRng::new(11);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.next_gauss()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
