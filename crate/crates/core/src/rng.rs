//! Deterministic pseudo-randomness for weight initialisation and synthetic
//! corpora.
//!
//! The generator is SplitMix64 — 64 bits of state, one multiply-xor-shift
//! avalanche per output — implemented here by hand rather than pulled from a
//! crate because the *exact* byte-for-byte stream is part of this toolkit's
//! reproducibility contract: a model binary regenerated from `(seed, config)`
//! on any platform must be bit-identical, which rules out depending on the
//! internal algorithm choices of an external RNG crate staying fixed across
//! versions. The reference stream is pinned by test vectors below.
//!
//! Draw-count discipline: every sampling helper consumes a *fixed, documented*
//! number of raw `u64`s per returned value ([`SplitMix64::next_normal`] always
//! consumes exactly two, even though it only uses the cosine branch of
//! Box-Muller), except [`SplitMix64::next_below`], which uses rejection
//! sampling and is therefore only used where the number of draws afterwards
//! does not matter (token streams from a dedicated sub-seed).

/// SplitMix64 pseudo-random generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    /// Creates a generator seeded with `seed`.
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform double in the half-open interval `(0, 1]`.
    ///
    /// The top 53 bits of a raw draw are mapped to the 2^53 equispaced values
    /// `k * 2^-53` for `k = 1..=2^53`; excluding zero means the value is
    /// always safe to pass to `ln()`.
    pub fn next_f64(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal deviate via Box-Muller (cosine branch).
    ///
    /// Consumes exactly two raw draws per call; the sine branch is discarded
    /// so the draw count per sample is constant, which keeps tensor fills
    /// independent of how callers batch their requests.
    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64(); // in (0, 1], so ln(u1) is finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, bound)` by rejection, free of modulo bias.
    ///
    /// Panics if `bound == 0`. The expected number of raw draws is below two
    /// for any bound; the exact count is data-dependent, so this helper is
    /// reserved for streams where nothing is drawn after it.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below requires a positive bound");
        // Largest multiple of `bound` that fits in u64; draws at or above it
        // would bias the low residues, so they are rejected.
        let zone = u64::MAX - (u64::MAX % bound + 1) % bound;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % bound;
            }
        }
    }

    /// Fills `out` with standard normal deviates scaled by `std`.
    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        for v in out.iter_mut() {
            *v = self.next_normal() * std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Pinned outputs of the reference SplitMix64 stream. These are the
    /// canonical first outputs for seeds 0, 42 and 0x0123456789ABCDEF of the
    /// standard splitmix64 algorithm (increment 0x9E3779B97F4A7C15,
    /// multipliers 0xBF58476D1CE4E5B9 / 0x94D049BB133111EB).
    #[test]
    fn reference_vectors() {
        let cases: [(u64, [u64; 4]); 3] = [
            (
                0,
                [
                    0xE220_A839_7B1D_CDAF,
                    0x6E78_9E6A_A1B9_65F4,
                    0x06C4_5D18_8009_454F,
                    0xF88B_B8A8_724C_81EC,
                ],
            ),
            (
                42,
                [
                    0xBDD7_3226_2FEB_6E95,
                    0x28EF_E333_B266_F103,
                    0x4752_6757_130F_9F52,
                    0x581C_E1FF_0E4A_E394,
                ],
            ),
            (
                0x0123_4567_89AB_CDEF,
                [
                    0x157A_3807_A48F_AA9D,
                    0xD573_529B_34A1_D093,
                    0x2F90_B72E_996D_CCBE,
                    0xA2D4_1933_4C46_67EC,
                ],
            ),
        ];
        for (seed, expected) in cases {
            let mut rng = SplitMix64::new(seed);
            for want in expected {
                assert_eq!(rng.next_u64(), want, "seed {seed}");
            }
        }
    }

    #[test]
    fn f64_range_is_half_open_unit() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..100_000 {
            let v = rng.next_f64();
            assert!(v > 0.0 && v <= 1.0, "v = {v}");
        }
    }

    #[test]
    fn normal_consumes_exactly_two_draws() {
        let mut a = SplitMix64::new(99);
        let mut b = SplitMix64::new(99);
        let _ = a.next_normal();
        let _ = b.next_u64();
        let _ = b.next_u64();
        // After one normal vs. two raw draws the states coincide.
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = SplitMix64::new(2024);
        let n = 200_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let v = rng.next_normal();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        // Loose statistical bounds; failures here would mean a broken
        // transform, not an unlucky seed (the seed is fixed).
        assert!(mean.abs() < 0.01, "mean = {mean}");
        assert!((var - 1.0).abs() < 0.02, "var = {var}");
    }

    #[test]
    fn next_below_is_in_range_and_unbiased_zone() {
        let mut rng = SplitMix64::new(5);
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            let v = rng.next_below(5) as usize;
            counts[v] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            // Each bucket expects 10_000; allow a generous band.
            assert!((8_000..=12_000).contains(c), "bucket {i} = {c}");
        }
        // Bound 1 always yields 0.
        assert_eq!(rng.next_below(1), 0);
    }

    #[test]
    fn streams_are_reproducible() {
        let mut a = SplitMix64::new(123);
        let mut b = SplitMix64::new(123);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}
