//! Failure-probability estimation for expensive limit-state functions by
//! adaptive design of experiments.
//!
//! The loop in [`driver`] trains an MLP surrogate ([`diffnet`]) on the
//! evaluated designs, fits a coupling-layer normalizing flow ([`flows`]) to
//! the surrogate's limit-state density ([`posterior`]), draws new designs
//! from the flow under one of three selection rules ([`designer`]), and
//! re-estimates the failure probability by Monte Carlo on the surrogate
//! ([`mc`]). Benchmarks live in [`problems`] and [`darcy`].

pub mod autodiff;
pub mod darcy;
pub mod designer;
pub mod diffnet;
pub mod driver;
pub mod error;
pub mod flows;
pub mod mc;
pub mod posterior;
pub mod problems;
pub mod rng;

pub use designer::{CriterionKind, DesignBatch, DesignCriterion};
pub use diffnet::{Dataset, SurrogateModel, TrainConfig};
pub use driver::{lhs_baseline, reference_mc, run_dnf, DnfConfig, RunTrace, StopReason};
pub use error::{Error, Result};
pub use flows::{FlowTrainConfig, NormalizingFlow};
pub use mc::McEstimate;
pub use problems::{make_problem, BoxDomain, Problem};
