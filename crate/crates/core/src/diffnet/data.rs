use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evaluated design points `{(x_i, y_i)}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Result<Self> {
        let mut d = Self::new(dim);
        for (x, y) in pairs {
            d.push(x, y)?;
        }
        Ok(d)
    }

    /// Appends a point; duplicate inputs (exact equality) are rejected.
    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if self.contains(&x) {
            return Err(Error::DuplicateInput);
        }
        self.inputs.push(x);
        self.outputs.push(y);
        Ok(())
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.inputs.iter().any(|row| row.as_slice() == x)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }
}

/// Per-coordinate affine standardization of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: f64,
    pub output_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    // zero spread falls back to unit scale
    let std = if std > 1e-12 * mean.abs().max(1.0) { std } else { 1.0 };
    (mean, std)
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            input_mean: vec![0.0; dim],
            input_std: vec![1.0; dim],
            output_mean: 0.0,
            output_std: 1.0,
        }
    }

    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (input_mean, input_std) = (0..data.dim())
            .map(|j| mean_std(data.inputs().iter().map(move |x| x[j])))
            .unzip();
        let (output_mean, output_std) = mean_std(data.outputs().iter().copied());
        Ok(Self {
            input_mean,
            input_std,
            output_mean,
            output_std,
        })
    }

    pub fn transform_input(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse_input(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn transform_output(&self, y: f64) -> f64 {
        (y - self.output_mean) / self.output_std
    }

    pub fn inverse_output(&self, v: f64) -> f64 {
        v * self.output_std + self.output_mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicates_rejected() {
        let mut d = Dataset::new(2);
        d.push(vec![1.0, 2.0], 0.5).unwrap();
        assert!(matches!(d.push(vec![1.0, 2.0], 0.7), Err(Error::DuplicateInput)));
        assert!(matches!(d.push(vec![1.0], 0.7), Err(Error::DimensionMismatch { .. })));
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn constant_outputs_get_unit_scale() {
        let d = Dataset::from_pairs(1, vec![(vec![0.0], 3.0), (vec![1.0], 3.0)]).unwrap();
        let s = Standardizer::fit(&d).unwrap();
        assert_eq!(s.output_std, 1.0);
        assert_eq!(s.output_mean, 3.0);
        assert!(Standardizer::fit(&Dataset::new(1)).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..20),
            probe in prop::collection::vec(-100.0f64..100.0, 3),
            y in -1e3f64..1e3,
        ) {
            let mut d = Dataset::new(3);
            for (i, r) in rows.into_iter().enumerate() {
                let _ = d.push(r, i as f64);
            }
            let s = Standardizer::fit(&d).unwrap();
            let back = s.inverse_input(&s.transform_input(&probe));
            for (a, b) in back.iter().zip(&probe) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            let yb = s.inverse_output(s.transform_output(y));
            prop_assert!((yb - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}
