//! Reliability problems: the abstract interface and the built-in benchmarks.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::darcy::{DarcyConfig, DarcyModel};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() || lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidConfig("box needs lower < upper in every coordinate".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn cube(dim: usize, lower: f64, upper: f64) -> Self {
        Self::new(vec![lower; dim], vec![upper; dim]).expect("valid cube")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    /// Largest side length, i.e. the L∞ diameter.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .fold(0.0, f64::max)
    }
}

/// Input density `p_X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputDensity {
    StandardNormal { dim: usize },
    Uniform { domain: BoxDomain },
}

impl InputDensity {
    pub fn dim(&self) -> usize {
        match self {
            Self::StandardNormal { dim } => *dim,
            Self::Uniform { domain } => domain.dim(),
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        match self {
            Self::StandardNormal { dim } => {
                -0.5 * x.iter().map(|v| v * v).sum::<f64>() - 0.5 * (*dim as f64) * (2.0 * PI).ln()
            }
            Self::Uniform { domain } => {
                if domain.contains(x) {
                    -domain
                        .lower
                        .iter()
                        .zip(&domain.upper)
                        .map(|(l, u)| (u - l).ln())
                        .sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded(seed);
        match self {
            Self::StandardNormal { dim } => (0..n)
                .map(|_| (0..*dim).map(|_| rng.sample(StandardNormal)).collect())
                .collect(),
            Self::Uniform { domain } => (0..n)
                .map(|_| {
                    domain
                        .lower
                        .iter()
                        .zip(&domain.upper)
                        .map(|(l, u)| rng.random_range(*l..*u))
                        .collect()
                })
                .collect(),
        }
    }
}

pub type LimitStateFn = dyn Fn(&[f64]) -> Result<f64> + Send + Sync;

/// A reliability problem with a metered limit-state function.
pub struct Problem {
    name: String,
    limit_state: Arc<LimitStateFn>,
    density: InputDensity,
    domain: BoxDomain,
    calls: AtomicUsize,
    /// Published failure probability, for context only.
    pub published_pf: Option<f64>,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("domain", &self.domain)
            .field("calls", &self.calls())
            .finish()
    }
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        limit_state: Arc<LimitStateFn>,
        density: InputDensity,
        domain: BoxDomain,
    ) -> Result<Self> {
        if density.dim() != domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: domain.dim(),
                got: density.dim(),
            });
        }
        Ok(Self {
            name: name.into(),
            limit_state,
            density,
            domain,
            calls: AtomicUsize::new(0),
            published_pf: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn density(&self) -> &InputDensity {
        &self.density
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    /// Number of limit-state evaluations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Evaluates `g(x)`; every call increments the meter exactly once.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.limit_state)(x)
    }

    /// Evaluates a batch concurrently; results keep input order.
    pub fn evaluate_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.par_iter().map(|x| self.evaluate(x)).collect()
    }

    /// Fraction of `n` prior samples falling inside the design box.
    pub fn box_mass(&self, n: usize, seed: u64) -> f64 {
        let inside = self
            .density
            .sample(n, seed)
            .iter()
            .filter(|x| self.domain.contains(x))
            .count();
        inside as f64 / n.max(1) as f64
    }
}

/// Four-branch series system (fourth branch uses `+ 7/√2`).
pub fn four_branch_g(x: &[f64]) -> f64 {
    let (a, b) = (x[0], x[1]);
    let q = 3.0 + 0.1 * (a - b).powi(2);
    let s = (a + b) / SQRT_2;
    let c = 7.0 / SQRT_2;
    (q - s).min(q + s).min((a - b) + c).min((b - a) + c)
}

pub const ISO_B: f64 = 5.0;
pub const ISO_K: f64 = 0.5;
pub const ISO_E: f64 = 0.1;

/// Parabolic iso-probability limit state `b − x₂ − k(x₁ − e)²`.
pub fn iso_probability_g(x: &[f64]) -> f64 {
    ISO_B - x[1] - ISO_K * (x[0] - ISO_E).powi(2)
}

const BOX_MASS_SAMPLES: usize = 10_000;
const BOX_MASS_MIN: f64 = 0.999;

/// Canonical problem name, accepting the CLI's short aliases.
pub fn canonical_name(name: &str) -> Option<&'static str> {
    match name.to_ascii_lowercase().replace('_', "-").as_str() {
        "four-branch" | "fourbranch" => Some("four-branch"),
        "iso-probability" | "iso" => Some("iso-probability"),
        "darcy" => Some("darcy"),
        _ => None,
    }
}

/// Builds a built-in benchmark by name.
pub fn make_problem(name: &str) -> Result<Problem> {
    make_problem_with(name, &DarcyConfig::default())
}

/// As [`make_problem`], with explicit Darcy solver settings.
pub fn make_problem_with(name: &str, darcy: &DarcyConfig) -> Result<Problem> {
    let canonical = canonical_name(name).ok_or_else(|| Error::UnknownProblem(name.into()))?;
    let problem = match canonical {
        "four-branch" => {
            let mut p = Problem::new(
                canonical,
                Arc::new(|x: &[f64]| Ok(four_branch_g(x))),
                InputDensity::StandardNormal { dim: 2 },
                BoxDomain::cube(2, -10.0, 10.0),
            )?;
            p.published_pf = Some(2.05e-3);
            p
        }
        "iso-probability" => {
            let mut p = Problem::new(
                canonical,
                Arc::new(|x: &[f64]| Ok(iso_probability_g(x))),
                InputDensity::StandardNormal { dim: 2 },
                BoxDomain::cube(2, -10.0, 10.0),
            )?;
            p.published_pf = Some(3.01e-3);
            p
        }
        _ => {
            let model = Arc::new(DarcyModel::new(darcy)?);
            let dim = model.dim();
            let mut p = Problem::new(
                canonical,
                Arc::new(move |x: &[f64]| model.limit_state(x)),
                InputDensity::StandardNormal { dim },
                BoxDomain::cube(dim, -5.0, 5.0),
            )?;
            p.published_pf = Some(4.24e-3);
            p
        }
    };
    let mass = problem.box_mass(BOX_MASS_SAMPLES, derive_seed(0, &[0xB0C5]));
    if mass < BOX_MASS_MIN {
        return Err(Error::InvalidConfig(format!(
            "design box of `{canonical}` holds only {mass} of the input mass"
        )));
    }
    problem.calls.store(0, Ordering::SeqCst);
    Ok(problem)
}
