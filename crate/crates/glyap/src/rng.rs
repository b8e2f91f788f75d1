//! Splittable counter-based random number generation.
//!
//! Every experiment in this crate draws randomness from a single seed
//! through a splittable generator so that runs are bit-reproducible:
//! the same `(seed, structure of splits)` always yields the same
//! numbers, independent of evaluation order across unrelated streams.
//!
//! The generator is counter-based: each draw is a stateless mix of
//! `(key, counter)` using the SplitMix64 finalizer, which passes
//! standard statistical batteries and is more than adequate for Monte
//! Carlo sampling and weight initialization (cryptographic strength is
//! a non-goal). [`Rng::split`] derives an independent child stream from
//! a label without consuming parent entropy, so subsystems can be
//! seeded hierarchically (`run -> module -> restart -> draw`).

/// SplitMix64 finalizer: a bijective avalanche mix of a 64-bit word.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splittable counter-based random stream.
#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    ctr: u64,
    /// Second Box-Muller normal, cached between calls.
    spare_normal: Option<f64>,
}

impl Rng {
    /// Create the root stream for a seed.
    #[must_use]
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(seed ^ 0x51AF_8BCF_0D43_9E1B),
            ctr: 0,
            spare_normal: None,
        }
    }

    /// Derive an independent child stream identified by `label`.
    ///
    /// Splitting is pure: it does not consume parent entropy, so the
    /// parent's own draw sequence is unaffected. Distinct labels give
    /// statistically independent streams.
    #[must_use]
    pub fn split(&self, label: u64) -> Rng {
        Rng {
            key: mix(self.key ^ mix(label ^ 0xD6E8_FEB8_6659_FD93)),
            ctr: 0,
            spare_normal: None,
        }
    }

    /// Next raw 64-bit draw.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.ctr = self.ctr.wrapping_add(1);
        mix(self.key.wrapping_add(self.ctr.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    }

    /// Uniform double in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[lo, hi)`.
    #[inline]
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() requires n > 0");
        // Modulo bias is negligible for n << 2^64.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw via Box-Muller (second value cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let t = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * t.sin());
        r * t.cos()
    }

    /// Uniform point in an axis-aligned box given per-dimension bounds.
    pub fn point_in_box(&mut self, lo: &[f64], hi: &[f64]) -> Vec<f64> {
        assert_eq!(lo.len(), hi.len(), "box bounds length mismatch");
        lo.iter()
            .zip(hi.iter())
            .map(|(&a, &b)| self.range(a, b))
            .collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }
}
