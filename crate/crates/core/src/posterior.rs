//! Unnormalized density concentrated on the surrogate's zero level set,
//! `p̃(x) ∝ exp(−|G(x)|/λ)` truncated to the design box.

use log::warn;

use crate::autodiff::Tensor;
use crate::diffnet::SurrogateModel;
use crate::error::{Error, Result};
use crate::flows::LogTarget;
use crate::problems::BoxDomain;

/// Smallest admissible scale parameter.
pub const LAMBDA_FLOOR: f64 = 1e-6;

/// Weight of the quadratic wall that replaces `−∞` outside the box while
/// training. A point that sits a fraction `δ` of the box side outside loses
/// `BARRIER_WEIGHT · δ²` nats on top of the value at its projection onto
/// the box, so samples that escape are pulled back.
pub const BARRIER_WEIGHT: f64 = 1e4;

/// Limit-state density built on a surrogate.
#[derive(Debug, Clone, Copy)]
pub struct LimitStatePosterior<'a> {
    surrogate: &'a SurrogateModel,
    lambda: f64,
    domain: &'a BoxDomain,
}

impl<'a> LimitStatePosterior<'a> {
    pub fn new(surrogate: &'a SurrogateModel, lambda: f64, domain: &'a BoxDomain) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("λ must be positive and finite, got {lambda}")));
        }
        if surrogate.dim() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: surrogate.dim(),
            });
        }
        Ok(Self {
            surrogate,
            lambda,
            domain,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn domain(&self) -> &BoxDomain {
        self.domain
    }

    /// `−|G(x)|/λ` inside the box, `−∞` outside.
    pub fn log_unnormalized(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.domain.dim(),
                got: x.len(),
            });
        }
        if !self.domain.contains(x) {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(-self.surrogate.evaluate(x)?.abs() / self.lambda)
    }
}

impl LogTarget for LimitStatePosterior<'_> {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn log_density_batch(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let d = self.domain.dim();
        let mut clamped = x.clone();
        for i in 0..x.rows() {
            for (j, v) in clamped.row_mut(i).iter_mut().enumerate() {
                *v = v.clamp(self.domain.lower[j], self.domain.upper[j]);
            }
        }
        let (g, mut grad) = self.surrogate.value_and_grad_batch(&clamped)?;
        let mut values = Vec::with_capacity(x.rows());
        for (i, gi) in g.iter().enumerate() {
            // the kink at G = 0 takes the zero subgradient
            let sign = if *gi > 0.0 { 1.0 } else if *gi < 0.0 { -1.0 } else { 0.0 };
            let mut value = -gi.abs() / self.lambda;
            let row = grad.row_mut(i);
            for j in 0..d {
                let side = self.domain.upper[j] - self.domain.lower[j];
                let excess = x.row(i)[j] - clamped.row(i)[j];
                if excess == 0.0 {
                    row[j] *= -sign / self.lambda;
                } else {
                    value -= BARRIER_WEIGHT * (excess / side).powi(2);
                    row[j] = -2.0 * BARRIER_WEIGHT * excess / (side * side);
                }
            }
            values.push(value);
        }
        Ok((values, grad))
    }
}

/// Result of the λ rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaChoice {
    pub lambda: f64,
    /// Set when the surrogate's spread was too small and the floor was used.
    pub degenerate: bool,
}

/// `fraction × std(values)`, floored at [`LAMBDA_FLOOR`].
pub fn lambda_from_values(values: &[f64], fraction: f64) -> Result<LambdaChoice> {
    if values.len() < 2 {
        return Err(Error::InvalidConfig("λ rule needs at least two values".into()));
    }
    if !(fraction > 0.0) {
        return Err(Error::InvalidConfig("λ fraction must be positive".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("surrogate output while choosing λ".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let lambda = fraction * var.sqrt();
    if lambda > LAMBDA_FLOOR {
        Ok(LambdaChoice {
            lambda,
            degenerate: false,
        })
    } else {
        warn!("surrogate output spread is degenerate; using λ = {LAMBDA_FLOOR}");
        Ok(LambdaChoice {
            lambda: LAMBDA_FLOOR,
            degenerate: true,
        })
    }
}

/// 5% of the standard deviation of `G` over `n ≥ 100` draws of `sampler`.
pub fn default_lambda<S>(surrogate: &SurrogateModel, sampler: S, n: usize) -> Result<LambdaChoice>
where
    S: FnOnce(usize) -> Vec<Vec<f64>>,
{
    if n < 100 {
        return Err(Error::InvalidConfig(format!("λ rule needs n ≥ 100 samples, got {n}")));
    }
    let xs = sampler(n);
    let values = surrogate.evaluate_points(&xs)?;
    lambda_from_values(&values, 0.05)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{DenseLayer, MlpParams, Standardizer};
    use crate::mc::gaussian_sample;

    /// `G(x) = a·x₁ + c` as a single linear layer.
    fn linear_surrogate(a: f64, c: f64) -> SurrogateModel {
        let p = MlpParams::from_layers(vec![DenseLayer {
            inputs: 2,
            outputs: 1,
            weights: vec![a, 0.0],
            bias: vec![c],
        }])
        .unwrap();
        SurrogateModel::from_params(p, Standardizer::identity(2)).unwrap()
    }

    #[test]
    fn spec_values() {
        let b = BoxDomain::cube(2, -10.0, 10.0);
        let s = linear_surrogate(1.0, 0.0);
        let post = LimitStatePosterior::new(&s, 0.5, &b).unwrap();
        assert_eq!(post.log_unnormalized(&[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(post.log_unnormalized(&[2.0, 3.0]).unwrap(), -4.0);
        assert_eq!(post.log_unnormalized(&[11.0, 0.0]).unwrap(), f64::NEG_INFINITY);
        assert!(LimitStatePosterior::new(&s, 0.0, &b).is_err());
    }

    #[test]
    fn scale_equivariance() {
        let b = BoxDomain::cube(2, -10.0, 10.0);
        let s1 = linear_surrogate(1.0, -0.5);
        let s10 = linear_surrogate(10.0, -5.0);
        let p1 = LimitStatePosterior::new(&s1, 0.3, &b).unwrap();
        let p10 = LimitStatePosterior::new(&s10, 3.0, &b).unwrap();
        for x in gaussian_sample(50, 2, 3) {
            let a = p1.log_unnormalized(&x).unwrap();
            let c = p10.log_unnormalized(&x).unwrap();
            assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
            assert!(a <= 0.0);
        }
    }

    #[test]
    fn batch_matches_pointwise_and_walls_off_outside() {
        let b = BoxDomain::cube(2, -10.0, 10.0);
        let s = linear_surrogate(2.0, 1.0);
        let post = LimitStatePosterior::new(&s, 0.5, &b).unwrap();
        let x = Tensor::from_vec(3, 2, vec![1.0, 0.0, -2.0, 4.0, 12.0, 0.0]);
        let (v, g) = post.log_density_batch(&x).unwrap();
        assert_eq!(v[0], post.log_unnormalized(&[1.0, 0.0]).unwrap());
        assert_eq!(g.row(0), &[-4.0, 0.0]);
        assert_eq!(g.row(1), &[4.0, 0.0]);
        // 2 units past a side of 20: projection value −21/0.5 plus 1e4·0.1²
        assert!((v[2] - (-42.0 - 100.0)).abs() < 1e-9);
        assert!((g.row(2)[0] - (-100.0)).abs() < 1e-9);
        assert_eq!(g.row(2)[1], 0.0);
    }

    #[test]
    fn lambda_rule() {
        let s = linear_surrogate(1.0, 0.0);
        let l = default_lambda(&s, |n| gaussian_sample(n, 2, 4), 20_000).unwrap();
        assert!((l.lambda - 0.05).abs() < 0.005);
        assert!(!l.degenerate);

        let s10 = linear_surrogate(10.0, 0.0);
        let l10 = default_lambda(&s10, |n| gaussian_sample(n, 2, 4), 20_000).unwrap();
        assert!((l10.lambda / l.lambda - 10.0).abs() < 1e-9);

        let c = linear_surrogate(0.0, 3.0);
        let lc = default_lambda(&c, |n| gaussian_sample(n, 2, 4), 200).unwrap();
        assert_eq!(lc.lambda, LAMBDA_FLOOR);
        assert!(lc.degenerate);

        assert!(default_lambda(&s, |n| gaussian_sample(n, 2, 4), 50).is_err());
    }
}
