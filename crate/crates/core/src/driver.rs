//! The sequential design loop: train the surrogate, fit a flow to its
//! limit-state density, select and evaluate new designs, re-estimate.

use std::io::{Read, Write};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::designer::{CriterionKind, DesignBatch, DesignCriterion, DEFAULT_CALIBRATION, DEFAULT_PROPOSAL_CAP};
use crate::diffnet::{train_surrogate, Dataset, SurrogateModel, TrainConfig};
use crate::error::{Error, Result};
use crate::flows::{train_flow, AffineMap, FlowTrainConfig};
use crate::mc::{lhs_sample, McEstimate};
use crate::posterior::{lambda_from_values, LimitStatePosterior};
use crate::problems::{BoxDomain, Problem};
use crate::rng::derive_seed;

const STAGE_SURROGATE: u64 = 1;
const STAGE_FLOW: u64 = 2;
const STAGE_SELECT: u64 = 3;
const STAGE_INITIAL: u64 = 4;
const STREAM_MC: u64 = 0x4D43;
const STREAM_LAMBDA: u64 = 0x4C41;

/// How the first `N0` points are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialDesign {
    Grid,
    Lhs,
}

mod tolerance_serde {
    //! JSON has no infinity, so an infinite tolerance is written as "inf".
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid tolerance `{t}`"))),
        }
    }
}

/// Settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnfConfig {
    pub n_max: usize,
    pub n0: usize,
    pub n_design: usize,
    /// Separation scale; `None` uses 2.5% of the smallest box side.
    pub eps0: Option<f64>,
    pub criterion: CriterionKind,
    /// Relative-change stopping tolerance; 0 disables the early stop.
    #[serde(with = "tolerance_serde")]
    pub tolerance: f64,
    pub min_iterations: usize,
    pub mc_samples: usize,
    pub lambda_fraction: f64,
    pub lambda_samples: usize,
    pub seed: u64,
    pub initial_design: InitialDesign,
    pub proposal_cap: usize,
    pub ag_calibration: usize,
    /// Base standard deviations mapped onto the half-width of the box.
    pub flow_sigmas: f64,
    pub surrogate: TrainConfig,
    pub flow: FlowTrainConfig,
}

impl Default for DnfConfig {
    fn default() -> Self {
        Self {
            n_max: 95,
            n0: 25,
            n_design: 2,
            eps0: None,
            criterion: CriterionKind::NfbdAg,
            tolerance: 0.10,
            min_iterations: 3,
            mc_samples: 100_000,
            lambda_fraction: 0.05,
            lambda_samples: 10_000,
            seed: 0,
            initial_design: InitialDesign::Grid,
            proposal_cap: DEFAULT_PROPOSAL_CAP,
            ag_calibration: DEFAULT_CALIBRATION,
            flow_sigmas: 3.0,
            surrogate: TrainConfig::default(),
            flow: FlowTrainConfig::default(),
        }
    }
}

/// Default ε0: 2.5% of the smallest side of the design box.
pub fn default_eps0(domain: &BoxDomain) -> f64 {
    let side = domain
        .lower
        .iter()
        .zip(&domain.upper)
        .map(|(l, u)| u - l)
        .fold(f64::INFINITY, f64::min);
    0.025 * side
}

impl DnfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n0 < 2 {
            return bad(format!("n0 must be at least 2, got {}", self.n0));
        }
        if self.n_max <= self.n0 {
            return bad(format!("n_max ({}) must exceed n0 ({})", self.n_max, self.n0));
        }
        if self.n_design == 0 || self.n_design > self.n_max - self.n0 {
            return bad(format!(
                "n_design must be in 1..={}, got {}",
                self.n_max - self.n0,
                self.n_design
            ));
        }
        if let Some(e) = self.eps0 {
            if !(e > 0.0 && e.is_finite()) {
                return bad(format!("eps0 must be positive, got {e}"));
            }
        }
        if !(self.tolerance >= 0.0) {
            return bad(format!("tolerance must be non-negative, got {}", self.tolerance));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be positive".into());
        }
        if self.lambda_samples < 100 {
            return bad(format!("lambda_samples must be at least 100, got {}", self.lambda_samples));
        }
        if !(self.lambda_fraction > 0.0 && self.lambda_fraction.is_finite()) {
            return bad(format!("lambda_fraction must be positive, got {}", self.lambda_fraction));
        }
        if self.proposal_cap == 0 || self.ag_calibration == 0 {
            return bad("proposal_cap and ag_calibration must be positive".into());
        }
        if !(self.flow_sigmas > 0.0 && self.flow_sigmas.is_finite()) {
            return bad(format!("flow_sigmas must be positive, got {}", self.flow_sigmas));
        }
        self.surrogate.validate()?;
        self.flow.validate()
    }

    pub fn eps0_for(&self, domain: &BoxDomain) -> f64 {
        self.eps0.unwrap_or_else(|| default_eps0(domain))
    }
}

/// `t_max = ⌈(N_max − N0)/N_D⌉` and the size of the final batch.
pub fn iteration_count(n_max: usize, n0: usize, n_design: usize) -> Result<(usize, usize)> {
    if n_design == 0 || n_max <= n0 {
        return Err(Error::InvalidConfig(format!(
            "need n_max > n0 and n_design ≥ 1 (got {n_max}, {n0}, {n_design})"
        )));
    }
    let budget = n_max - n0;
    let t_max = budget.div_ceil(n_design);
    Ok((t_max, budget - (t_max - 1) * n_design))
}

/// Grid-mode points: an `L`-per-axis lattice with `L^d ≥ N0`, thinned to `N0`
/// points taken at evenly spaced lattice indices (first and last included).
pub fn grid_points(n0: usize, domain: &BoxDomain) -> Vec<Vec<f64>> {
    let d = domain.dim();
    let mut per_axis = 1usize;
    while per_axis.saturating_pow(d as u32) < n0 {
        per_axis += 1;
    }
    let total = per_axis.pow(d as u32);
    let coord = |j: usize, k: usize| {
        if per_axis == 1 {
            0.5 * (domain.lower[j] + domain.upper[j])
        } else {
            domain.lower[j] + (domain.upper[j] - domain.lower[j]) * k as f64 / (per_axis - 1) as f64
        }
    };
    let lattice = |mut idx: usize| {
        let mut p = vec![0.0; d];
        for j in (0..d).rev() {
            p[j] = coord(j, idx % per_axis);
            idx /= per_axis;
        }
        p
    };
    if n0 == 1 {
        return vec![lattice(0)];
    }
    (0..n0)
        .map(|i| {
            let idx = (i as f64 * (total - 1) as f64 / (n0 - 1) as f64).round() as usize;
            lattice(idx)
        })
        .collect()
}

/// Places and evaluates the initial design through the metered `g`.
pub fn initial_design(problem: &Problem, n0: usize, mode: InitialDesign, seed: u64) -> Result<Dataset> {
    if n0 < 2 {
        return Err(Error::InvalidConfig(format!("n0 must be at least 2, got {n0}")));
    }
    let points = match mode {
        InitialDesign::Grid => grid_points(n0, problem.domain()),
        InitialDesign::Lhs => lhs_sample(n0, problem.domain(), seed),
    };
    let values = problem.evaluate_many(&points)?;
    Dataset::from_pairs(problem.dim(), points.into_iter().zip(values))
}

/// Why the loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    ToleranceMet,
    BudgetExhausted,
}

/// Estimate after the initial design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialRecord {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub p_hat: f64,
    pub surrogate_loss: f64,
}

/// One pass of the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub requested: usize,
    pub cumulative_calls: usize,
    pub batch: DesignBatch,
    /// `g` at the accepted points, in batch order.
    pub values: Vec<f64>,
    pub p_hat: f64,
    /// `|p̂_t − p̂_{t−1}| / p̂_{t−1}`; absent when `p̂_{t−1} = 0`.
    pub rel_change: Option<f64>,
    pub lambda: f64,
    pub lambda_degenerate: bool,
    pub flow_objective_first: f64,
    pub flow_objective_last: f64,
    pub surrogate_loss: f64,
}

/// Full record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub problem: String,
    pub config: DnfConfig,
    pub eps0: f64,
    pub t_max: usize,
    pub initial: Option<InitialRecord>,
    pub iterations: Vec<IterationRecord>,
    pub final_estimate: Option<f64>,
    pub stop_reason: Option<StopReason>,
    pub total_calls: usize,
    /// Set when the run aborted.
    pub failure: Option<String>,
}

impl RunTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `iteration,cumulative_calls,p_hat,rel_change,criterion`; row 0
    /// is the initial design.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "cumulative_calls", "p_hat", "rel_change", "criterion"])
            .map_err(csv_err)?;
        let crit = self.config.criterion.to_string();
        if let Some(init) = &self.initial {
            w.write_record(["0".into(), init.points.len().to_string(), init.p_hat.to_string(), String::new(), crit.clone()])
                .map_err(csv_err)?;
        }
        for r in &self.iterations {
            w.write_record([
                r.iteration.to_string(),
                r.cumulative_calls.to_string(),
                r.p_hat.to_string(),
                r.rel_change.map(|v| v.to_string()).unwrap_or_default(),
                crit.clone(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One row of a trace CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cumulative_calls: usize,
    pub p_hat: f64,
    pub rel_change: Option<f64>,
    pub criterion: CriterionKind,
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Surrogate-based estimate on a fixed sample.
fn surrogate_estimate(surrogate: &SurrogateModel, samples: &Tensor) -> Result<McEstimate> {
    McEstimate::from_values(&surrogate.evaluate_batch(samples)?)
}

/// A finished (or aborted) run with its final surrogate and data.
#[derive(Debug)]
pub struct DnfOutcome {
    pub trace: RunTrace,
    pub surrogate: Option<SurrogateModel>,
    pub data: Dataset,
    /// The error that aborted the run, if any; also summarized in `trace.failure`.
    pub error: Option<Error>,
}

/// Runs the loop and returns the trace, or the error that aborted it.
pub fn run_dnf(problem: &Problem, config: &DnfConfig) -> Result<RunTrace> {
    let out = run_dnf_detailed(problem, config)?;
    match out.error {
        Some(e) => Err(e),
        None => Ok(out.trace),
    }
}

/// Runs the loop. Only configuration errors are returned as `Err`; runtime
/// failures are recorded in the outcome alongside the partial trace.
pub fn run_dnf_detailed(problem: &Problem, config: &DnfConfig) -> Result<DnfOutcome> {
    config.validate()?;
    let (t_max, last_batch) = iteration_count(config.n_max, config.n0, config.n_design)?;
    let domain = problem.domain();
    let eps0 = config.eps0_for(domain);
    let criterion = DesignCriterion {
        kind: config.criterion,
        eps0,
        proposal_cap: config.proposal_cap,
    };
    criterion.validate()?;
    let mut trace = RunTrace {
        problem: problem.name().to_string(),
        config: config.clone(),
        eps0,
        t_max,
        initial: None,
        iterations: Vec::new(),
        final_estimate: None,
        stop_reason: None,
        total_calls: 0,
        failure: None,
    };
    let mut data = Dataset::new(problem.dim());
    let mut surrogate = None;
    let result = dnf_loop(problem, config, &criterion, t_max, last_batch, &mut trace, &mut data, &mut surrogate);
    let error = result.err();
    if let Some(e) = &error {
        trace.failure = Some(e.to_string());
    }
    Ok(DnfOutcome {
        trace,
        surrogate,
        data,
        error,
    })
}

#[allow(clippy::too_many_arguments)]
fn dnf_loop(
    problem: &Problem,
    config: &DnfConfig,
    criterion: &DesignCriterion,
    t_max: usize,
    last_batch: usize,
    trace: &mut RunTrace,
    data: &mut Dataset,
    surrogate_slot: &mut Option<SurrogateModel>,
) -> Result<()> {
    let seed = config.seed;
    let d = problem.dim();
    let domain = problem.domain();
    let density = problem.density();
    let start_calls = problem.calls();
    let calls = || problem.calls() - start_calls;

    let mc = Tensor::from_rows(&density.sample(config.mc_samples, derive_seed(seed, &[STREAM_MC])), d);
    let lambda_points = Tensor::from_rows(&density.sample(config.lambda_samples, derive_seed(seed, &[STREAM_LAMBDA])), d);
    let train = |data: &Dataset, t: usize| {
        let cfg = TrainConfig {
            seed: derive_seed(seed, &[t as u64, STAGE_SURROGATE]),
            ..config.surrogate.clone()
        };
        train_surrogate(data, &cfg)
    };

    *data = initial_design(problem, config.n0, config.initial_design, derive_seed(seed, &[0, STAGE_INITIAL]))?;
    trace.total_calls = calls();
    let mut surrogate = train(data, 0)?;
    let mut p_prev = surrogate_estimate(&surrogate, &mc)?.estimate;
    trace.initial = Some(InitialRecord {
        points: data.inputs().to_vec(),
        values: data.outputs().to_vec(),
        p_hat: p_prev,
        surrogate_loss: surrogate.meta.final_loss,
    });
    trace.final_estimate = Some(p_prev);
    *surrogate_slot = Some(surrogate.clone());
    info!("{}: initial design of {} points, p̂ = {p_prev:e}", problem.name(), data.len());

    let output = AffineMap::from_box(domain, config.flow_sigmas);
    for t in 1..=t_max {
        let requested = if t == t_max { last_batch } else { config.n_design };
        let g_lambda = surrogate.evaluate_batch(&lambda_points)?;
        let lambda = lambda_from_values(&g_lambda, config.lambda_fraction)?;
        let posterior = LimitStatePosterior::new(&surrogate, lambda.lambda, domain)?;
        let flow_cfg = FlowTrainConfig {
            seed: derive_seed(seed, &[t as u64, STAGE_FLOW]),
            ..config.flow.clone()
        };
        let (flow, report) = train_flow(&posterior, &flow_cfg, output.clone())?;
        let mut batch = criterion.select(
            &flow,
            data.inputs(),
            requested,
            domain,
            |x| density.log_pdf(x),
            config.ag_calibration,
            derive_seed(seed, &[t as u64, STAGE_SELECT]),
        )?;
        // exact repeats of existing designs carry no information and are dropped
        let keep: Vec<bool> = batch.points.iter().map(|p| !data.contains(p)).collect();
        if keep.iter().any(|k| !k) {
            let mut k = keep.iter();
            batch.points.retain(|_| *k.next().unwrap());
            let mut k = keep.iter();
            batch.thresholds.retain(|_| *k.next().unwrap());
            batch.shortfall = true;
        }
        let values = problem.evaluate_many(&batch.points)?;
        for (x, y) in batch.points.iter().zip(&values) {
            data.push(x.clone(), *y)?;
        }
        surrogate = train(data, t)?;
        let p_hat = surrogate_estimate(&surrogate, &mc)?.estimate;
        let rel_change = (p_prev > 0.0).then(|| (p_hat - p_prev).abs() / p_prev);
        debug!("iteration {t}: {} new points, λ = {:e}, p̂ = {p_hat:e}", batch.len(), lambda.lambda);
        trace.iterations.push(IterationRecord {
            iteration: t,
            requested,
            cumulative_calls: calls(),
            batch,
            values,
            p_hat,
            rel_change,
            lambda: lambda.lambda,
            lambda_degenerate: lambda.degenerate,
            flow_objective_first: report.first_decile_mean(),
            flow_objective_last: report.last_decile_mean(),
            surrogate_loss: surrogate.meta.final_loss,
        });
        trace.total_calls = calls();
        trace.final_estimate = Some(p_hat);
        *surrogate_slot = Some(surrogate.clone());
        p_prev = p_hat;

        let stop_enabled = config.tolerance > 0.0 && t >= config.min_iterations;
        let converged = config.tolerance.is_infinite() || rel_change.is_some_and(|r| r < config.tolerance);
        if stop_enabled && converged {
            trace.stop_reason = Some(StopReason::ToleranceMet);
            info!("stopping at iteration {t}: relative change below tolerance");
            return Ok(());
        }
    }
    trace.stop_reason = Some(StopReason::BudgetExhausted);
    Ok(())
}

/// Baseline: one surrogate trained on `n_max` LHS points over the box,
/// estimated by Monte Carlo with `n_mc` input samples.
pub fn lhs_baseline(problem: &Problem, n_max: usize, n_mc: usize, seed: u64, train: &TrainConfig) -> Result<McEstimate> {
    if n_max < 2 {
        return Err(Error::InvalidConfig(format!("baseline needs at least 2 points, got {n_max}")));
    }
    if n_mc == 0 {
        return Err(Error::InvalidConfig("baseline needs at least one Monte Carlo sample".into()));
    }
    let points = lhs_sample(n_max, problem.domain(), derive_seed(seed, &[0, STAGE_INITIAL]));
    let values = problem.evaluate_many(&points)?;
    let data = Dataset::from_pairs(problem.dim(), points.into_iter().zip(values))?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, &[0, STAGE_SURROGATE]),
        ..train.clone()
    };
    let surrogate = train_surrogate(&data, &cfg)?;
    let mc = Tensor::from_rows(&problem.density().sample(n_mc, derive_seed(seed, &[STREAM_MC])), problem.dim());
    surrogate_estimate(&surrogate, &mc)
}

/// Direct Monte Carlo on the true limit state: `n` draws of the input
/// density, every one a metered call of `g`.
pub fn reference_mc(problem: &Problem, n: usize, seed: u64) -> Result<McEstimate> {
    if n == 0 {
        return Err(Error::InvalidConfig("reference needs at least one sample".into()));
    }
    let samples = problem.density().sample(n, derive_seed(seed, &[STREAM_MC]));
    McEstimate::from_values(&problem.evaluate_many(&samples)?)
}
