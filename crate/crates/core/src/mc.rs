//! Indicator-based Monte Carlo estimation and sampling designs.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::BoxDomain;
use crate::rng::seeded;

/// Failure indicator: 1 when `y ≤ 0`.
pub fn indicator(y: f64) -> u8 {
    (y <= 0.0) as u8
}

/// Monte Carlo failure-probability estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub samples: usize,
    pub failures: usize,
    pub std_error: f64,
}

impl McEstimate {
    pub fn from_counts(failures: usize, samples: usize) -> Self {
        let p = failures as f64 / samples as f64;
        Self {
            estimate: p,
            samples,
            failures,
            std_error: (p * (1.0 - p) / samples as f64).sqrt(),
        }
    }

    /// Counts failures among limit-state values; any non-finite value is an
    /// error naming its index.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("Monte Carlo needs at least one sample".into()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { index });
        }
        let failures = values.iter().map(|&v| indicator(v) as usize).sum();
        Ok(Self::from_counts(failures, values.len()))
    }

    /// Coefficient of variation `se / p̂` (infinite when `p̂ = 0`).
    pub fn cov(&self) -> f64 {
        self.std_error / self.estimate
    }
}

/// `P̂ = (1/n) Σ I(g(x_i))` over `n` draws of `sampler(n, seed)`.
pub fn mc_failure_probability<E, S>(evaluator: E, sampler: S, n: usize, seed: u64) -> Result<McEstimate>
where
    E: Fn(&[f64]) -> f64 + Sync,
    S: FnOnce(usize, u64) -> Vec<Vec<f64>>,
{
    if n == 0 {
        return Err(Error::InvalidConfig("Monte Carlo needs at least one sample".into()));
    }
    let samples = sampler(n, seed);
    let values: Vec<f64> = samples.par_iter().map(|x| evaluator(x)).collect();
    McEstimate::from_values(&values)
}

/// Standard-normal vectors, row by row.
pub fn gaussian_sample(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Same draws as [`gaussian_sample`], flattened row-major.
pub fn gaussian_sample_flat(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n * d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Latin hypercube design: in every coordinate each of the `n` equal bins
/// holds exactly one point.
pub fn lhs_sample(n: usize, domain: &BoxDomain, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seeded(seed);
    let d = domain.dim();
    let mut points = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut bins: Vec<usize> = (0..n).collect();
        bins.shuffle(&mut rng);
        let width = (domain.upper[j] - domain.lower[j]) / n as f64;
        for (p, &b) in points.iter_mut().zip(&bins) {
            // offsets stay 1e-9 away from the bin edges so the bin is
            // recoverable from the coordinate under rounding
            let u: f64 = rng.random();
            let offset = 1e-9 + u * (1.0 - 2e-9);
            p[j] = domain.lower[j] + (b as f64 + offset) * width;
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn indicator_convention() {
        assert_eq!(indicator(-0.5), 1);
        assert_eq!(indicator(0.0), 1);
        assert_eq!(indicator(0.3), 0);
    }

    #[test]
    fn constant_evaluators() {
        let s = |n, seed| gaussian_sample(n, 2, seed);
        assert_eq!(mc_failure_probability(|_| -1.0, s, 100, 1).unwrap().estimate, 1.0);
        assert_eq!(mc_failure_probability(|_| 1.0, s, 100, 1).unwrap().estimate, 0.0);
        assert!(mc_failure_probability(|_| 1.0, s, 0, 1).is_err());
    }

    #[test]
    fn non_finite_sample_is_named() {
        let s = |n, seed| gaussian_sample(n, 1, seed);
        let mut idx = 0usize;
        let samples = gaussian_sample(50, 1, 9);
        for (i, x) in samples.iter().enumerate() {
            if x[0] > 1.0 {
                idx = i;
                break;
            }
        }
        let r = mc_failure_probability(|x| if x[0] > 1.0 { f64::NAN } else { 1.0 }, s, 50, 9);
        match r {
            Err(Error::NonFiniteSample { index }) => assert_eq!(index, idx),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gaussian_moments() {
        let n = 100_000;
        let xs = gaussian_sample(n, 3, 5);
        for j in 0..3 {
            let m = xs.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n as f64;
            assert!(m.abs() < 4.0 / (n as f64).sqrt());
            assert!((v - 1.0).abs() < 0.1);
        }
        assert_eq!(gaussian_sample(10, 2, 5), gaussian_sample(10, 2, 5));
        assert_eq!(gaussian_sample(10, 2, 5).concat(), gaussian_sample_flat(10, 2, 5));
    }

    #[test]
    fn lhs_quartiles() {
        let b = BoxDomain::cube(2, 0.0, 1.0);
        let pts = lhs_sample(4, &b, 11);
        for j in 0..2 {
            let mut bins: Vec<usize> = pts.iter().map(|p| (p[j] * 4.0).floor() as usize).collect();
            bins.sort();
            assert_eq!(bins, vec![0, 1, 2, 3]);
        }
        let one = lhs_sample(1, &b, 2);
        assert!(b.contains(&one[0]));
    }

    proptest! {
        #[test]
        fn lhs_stratification_is_exact(n in 1usize..60, d in 1usize..5, seed in any::<u64>(),
                                       lo in -20.0f64..0.0, span in 0.5f64..30.0) {
            let b = BoxDomain::cube(d, lo, lo + span);
            let pts = lhs_sample(n, &b, seed);
            prop_assert_eq!(pts.len(), n);
            for j in 0..d {
                let w = span / n as f64;
                let mut bins: Vec<usize> = pts.iter().map(|p| ((p[j] - lo) / w).floor() as usize).collect();
                bins.sort();
                prop_assert_eq!(bins, (0..n).collect::<Vec<_>>());
            }
        }

        #[test]
        fn positive_scaling_keeps_estimate(c in 0.01f64..100.0, seed in 0u64..1000) {
            let s = |n, sd| gaussian_sample(n, 2, sd);
            let a = mc_failure_probability(|x| 1.0 - x[0], s, 2000, seed).unwrap();
            let b = mc_failure_probability(|x| c * (1.0 - x[0]), s, 2000, seed).unwrap();
            prop_assert_eq!(a.estimate, b.estimate);
        }
    }
}
