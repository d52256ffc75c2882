//! Seeded random sources and the noise distributions shared by the sketches.
//!
//! Every source is a ChaCha8 stream keyed by a 64-bit seed, so a given seed
//! reproduces the same draws on every platform. Child seeds are derived from
//! `(seed, label)` with a SplitMix64 finalizer, which lets per-trial,
//! per-instance and per-level randomness be split off without coordination.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, SketchError};

/// Environment variable that overrides the CLI `--seed` flag.
pub const SEED_ENV_VAR: &str = "SKETCH_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Derives an independent child seed for `label`.
    ///
    /// The derivation is a pure function of `(self, label)`.
    pub fn derive(self, label: u64) -> RngSeed {
        let mixed = splitmix64(self.0 ^ splitmix64(label.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        RngSeed(splitmix64(mixed))
    }

    /// Same as [`RngSeed::derive`] with a textual label.
    pub fn derive_named(self, label: &str) -> RngSeed {
        // FNV-1a keeps the label hash stable across Rust releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self.derive(h)
    }
}

impl From<u64> for RngSeed {
    fn from(seed: u64) -> Self {
        RngSeed(seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Whether Laplace noise is actually drawn.
///
/// `Zero` turns every Laplace draw into an exact `0.0`; Bernoulli and
/// exponential draws are unaffected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    #[default]
    Live,
    Zero,
}

impl std::str::FromStr for NoiseMode {
    type Err = SketchError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "live" => Ok(NoiseMode::Live),
            "zero" => Ok(NoiseMode::Zero),
            other => Err(SketchError::invalid(format!(
                "noise mode must be `live` or `zero`, got `{other}`"
            ))),
        }
    }
}

/// A single-owner random source.
#[derive(Debug, Clone)]
pub struct RandomSource {
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: RngSeed) -> Self {
        RandomSource {
            rng: ChaCha8Rng::seed_from_u64(seed.0),
        }
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform draw in the open interval `(0, 1)`.
    #[inline]
    fn open01(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Returns `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(SketchError::invalid(format!(
                "Bernoulli probability must lie in [0, 1], got {p}"
            )));
        }
        Ok(self.uniform() < p)
    }

    /// Fair coin.
    #[inline]
    pub fn coin(&mut self) -> bool {
        self.rng.next_u64() >> 63 == 1
    }

    /// Exponential draw with the given rate (mean `1 / rate`).
    pub fn exponential(&mut self, rate: f64) -> Result<f64> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(SketchError::invalid(format!(
                "exponential rate must be positive and finite, got {rate}"
            )));
        }
        Ok(self.exponential_unchecked(rate))
    }

    #[inline]
    pub(crate) fn exponential_unchecked(&mut self, rate: f64) -> f64 {
        -self.open01().ln() / rate
    }

    /// Symmetric Laplace draw with the given scale, via the inverse CDF of a
    /// single uniform. Returns exactly `0.0` in [`NoiseMode::Zero`].
    pub fn laplace(&mut self, scale: f64, mode: NoiseMode) -> Result<f64> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(SketchError::invalid(format!(
                "Laplace scale must be positive and finite, got {scale}"
            )));
        }
        Ok(match mode {
            NoiseMode::Zero => 0.0,
            NoiseMode::Live => {
                let v = self.open01() - 0.5;
                -scale * v.signum() * (1.0 - 2.0 * v.abs()).ln()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DRAWS: usize = 1_000_000;

    #[test]
    fn bernoulli_edges_and_validation() {
        let mut rng = RandomSource::new(RngSeed(1));
        for _ in 0..1000 {
            assert!(rng.bernoulli(1.0).unwrap());
            assert!(!rng.bernoulli(0.0).unwrap());
        }
        assert!(rng.bernoulli(-0.1).is_err());
        assert!(rng.bernoulli(1.5).is_err());
        assert!(rng.bernoulli(f64::NAN).is_err());
    }

    #[test]
    fn bernoulli_mean() {
        let mut rng = RandomSource::new(RngSeed(2));
        let hits = (0..DRAWS).filter(|_| rng.bernoulli(0.3).unwrap()).count();
        let mean = hits as f64 / DRAWS as f64;
        assert!((mean - 0.3).abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn exponential_mean_and_median() {
        let mut rng = RandomSource::new(RngSeed(3));
        let mean: f64 = (0..DRAWS)
            .map(|_| rng.exponential(1.0).unwrap())
            .sum::<f64>()
            / DRAWS as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");

        let median = std::f64::consts::LN_2 / 2.0;
        let below = (0..DRAWS)
            .filter(|_| rng.exponential(2.0).unwrap() < median)
            .count() as f64
            / DRAWS as f64;
        assert!((below - 0.5).abs() < 0.005, "fraction below median {below}");
    }

    #[test]
    fn exponential_extreme_rate_and_validation() {
        let mut rng = RandomSource::new(RngSeed(4));
        for _ in 0..10_000 {
            let x = rng.exponential(1e9).unwrap();
            assert!(x.is_finite() && x >= 0.0);
        }
        assert!(rng.exponential(0.0).is_err());
        assert!(rng.exponential(-1.0).is_err());
    }

    #[test]
    fn laplace_zero_mode_and_validation() {
        let mut rng = RandomSource::new(RngSeed(5));
        assert_eq!(rng.laplace(5.0, NoiseMode::Zero).unwrap(), 0.0);
        assert!(rng.laplace(0.0, NoiseMode::Live).is_err());
        assert!(rng.laplace(-2.0, NoiseMode::Zero).is_err());
    }

    #[test]
    fn laplace_moments_and_tail() {
        let mut rng = RandomSource::new(RngSeed(6));
        let draws: Vec<f64> = (0..DRAWS)
            .map(|_| rng.laplace(1.0, NoiseMode::Live).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / DRAWS as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        // Pr[|X| > ln 10] = exp(-ln 10) = 0.1 for unit scale.
        let tail = draws.iter().filter(|x| x.abs() > 10f64.ln()).count() as f64 / DRAWS as f64;
        assert!((tail - 0.1).abs() < 0.003, "tail {tail}");
    }

    #[test]
    fn equal_seeds_reproduce() {
        let mut a = RandomSource::new(RngSeed(99));
        let mut b = RandomSource::new(RngSeed(99));
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_labels_differ() {
        let root = RngSeed(7);
        assert_eq!(root.derive(3), root.derive(3));
        assert_ne!(root.derive(3), root.derive(4));
        assert_ne!(root.derive_named("sketch"), root.derive_named("input"));
        let mut a = RandomSource::new(root.derive(1));
        let mut b = RandomSource::new(root.derive(2));
        let same = (0..64).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }
}
