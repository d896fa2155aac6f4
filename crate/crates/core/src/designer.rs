//! Design-point selection from flow samples: plain sampling (NFBD), a fixed
//! L∞ separation filter (NFBD-FG), and a density-adaptive filter (NFBD-AG).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::NormalizingFlow;
use crate::problems::BoxDomain;
use crate::rng::seeded;

/// Default number of flow draws a single batch may consume.
pub const DEFAULT_PROPOSAL_CAP: usize = 10_000;

/// Default size of the sample used to calibrate β.
pub const DEFAULT_CALIBRATION: usize = 1024;

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CriterionKind {
    #[serde(rename = "nfbd")]
    Nfbd,
    #[serde(rename = "nfbd-fg")]
    NfbdFg,
    #[serde(rename = "nfbd-ag")]
    NfbdAg,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 3] = [CriterionKind::Nfbd, CriterionKind::NfbdFg, CriterionKind::NfbdAg];

    pub fn as_str(&self) -> &'static str {
        match self {
            CriterionKind::Nfbd => "nfbd",
            CriterionKind::NfbdFg => "nfbd-fg",
            CriterionKind::NfbdAg => "nfbd-ag",
        }
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "nfbd" => Ok(CriterionKind::Nfbd),
            "nfbd-fg" | "fg" => Ok(CriterionKind::NfbdFg),
            "nfbd-ag" | "ag" => Ok(CriterionKind::NfbdAg),
            other => Err(Error::InvalidConfig(format!(
                "unknown criterion `{other}` (expected nfbd, nfbd-fg or nfbd-ag)"
            ))),
        }
    }
}

/// A selection rule with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignCriterion {
    pub kind: CriterionKind,
    pub eps0: f64,
    pub proposal_cap: usize,
}

impl DesignCriterion {
    pub fn new(kind: CriterionKind, eps0: f64) -> Result<Self> {
        let c = Self {
            kind,
            eps0,
            proposal_cap: DEFAULT_PROPOSAL_CAP,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != CriterionKind::Nfbd && !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::InvalidConfig(format!("eps0 must be positive, got {}", self.eps0)));
        }
        if self.proposal_cap == 0 {
            return Err(Error::InvalidConfig("proposal cap must be positive".into()));
        }
        Ok(())
    }

    /// Runs the configured rule. `log_pdf` is only consulted by NFBD-AG.
    #[allow(clippy::too_many_arguments)]
    pub fn select<P>(
        &self,
        flow: &NormalizingFlow,
        data: &[Vec<f64>],
        n: usize,
        domain: &BoxDomain,
        log_pdf: P,
        calibration: usize,
        seed: u64,
    ) -> Result<DesignBatch>
    where
        P: Fn(&[f64]) -> f64,
    {
        self.validate()?;
        match self.kind {
            CriterionKind::Nfbd => nfbd_select_capped(flow, n, domain, seed, self.proposal_cap),
            CriterionKind::NfbdFg => nfbd_fg_select_capped(flow, data, n, self.eps0, domain, seed, self.proposal_cap),
            CriterionKind::NfbdAg => {
                nfbd_ag_select_capped(flow, data, n, self.eps0, log_pdf, domain, seed, self.proposal_cap, calibration)
            }
        }
    }
}

/// Accepted design points of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignBatch {
    pub points: Vec<Vec<f64>>,
    /// Flow draws consumed by the filter (calibration draws excluded).
    pub proposals: usize,
    /// Separation threshold applied to each accepted point (0 for NFBD).
    pub thresholds: Vec<f64>,
    /// True when the proposal cap ran out before the batch was full.
    pub shortfall: bool,
    /// Calibrated β for NFBD-AG.
    pub beta: Option<f64>,
}

impl DesignBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `min_i ‖z − x_i‖∞` over the data inputs.
pub fn rho(z: &[f64], data: &[Vec<f64>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(data.iter().map(|x| linf(z, x)).fold(f64::INFINITY, f64::min))
}

fn rho_or_inf(z: &[f64], a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().chain(b).map(|x| linf(z, x)).fold(f64::INFINITY, f64::min)
}

/// Lazily draws flow samples in fixed-size chunks from one seeded stream.
struct Proposals<'a> {
    flow: &'a NormalizingFlow,
    rng: crate::rng::Rng,
    buffer: Vec<Vec<f64>>,
    drawn: usize,
    cap: usize,
}

impl<'a> Proposals<'a> {
    fn new(flow: &'a NormalizingFlow, seed: u64, cap: usize) -> Self {
        Self {
            flow,
            rng: seeded(seed),
            buffer: Vec::new(),
            drawn: 0,
            cap,
        }
    }

    fn next(&mut self) -> Result<Option<Vec<f64>>> {
        if self.drawn >= self.cap {
            return Ok(None);
        }
        if self.buffer.is_empty() {
            let mut rows = self.flow.sample_with(CHUNK, &mut self.rng)?.to_rows();
            rows.reverse();
            self.buffer = rows;
        }
        self.drawn += 1;
        Ok(self.buffer.pop())
    }
}

fn check_n(n: usize, flow: &NormalizingFlow, domain: &BoxDomain) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    if flow.dim() != domain.dim() {
        return Err(Error::DimensionMismatch {
            expected: domain.dim(),
            got: flow.dim(),
        });
    }
    Ok(())
}

fn nfbd_select_capped(flow: &NormalizingFlow, n: usize, domain: &BoxDomain, seed: u64, cap: usize) -> Result<DesignBatch> {
    check_n(n, flow, domain)?;
    let mut stream = Proposals::new(flow, seed, cap);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        match stream.next()? {
            Some(z) if domain.contains(&z) => points.push(z),
            Some(_) => {}
            None => {
                return Err(Error::ProposalCapExhausted {
                    cap,
                    found: points.len(),
                    wanted: n,
                })
            }
        }
    }
    Ok(DesignBatch {
        thresholds: vec![0.0; points.len()],
        points,
        proposals: stream.drawn,
        shortfall: false,
        beta: None,
    })
}

/// The first `n` in-box flow samples.
pub fn nfbd_select(flow: &NormalizingFlow, n: usize, domain: &BoxDomain, seed: u64) -> Result<DesignBatch> {
    nfbd_select_capped(flow, n, domain, seed, DEFAULT_PROPOSAL_CAP)
}

/// Sequential filter shared by FG and AG: accepts an in-box proposal when its
/// distance to the data and to earlier accepted points reaches `threshold(z)`.
fn filtered_select<T>(
    stream: &mut Proposals<'_>,
    data: &[Vec<f64>],
    n: usize,
    domain: &BoxDomain,
    threshold: T,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)>
where
    T: Fn(&[f64]) -> f64,
{
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut thresholds = Vec::with_capacity(n);
    while points.len() < n {
        let Some(z) = stream.next()? else { break };
        if !domain.contains(&z) {
            continue;
        }
        let t = threshold(&z);
        if rho_or_inf(&z, data, &points) >= t {
            points.push(z);
            thresholds.push(t);
        }
    }
    Ok((points, thresholds))
}

fn nfbd_fg_select_capped(
    flow: &NormalizingFlow,
    data: &[Vec<f64>],
    n: usize,
    eps0: f64,
    domain: &BoxDomain,
    seed: u64,
    cap: usize,
) -> Result<DesignBatch> {
    check_n(n, flow, domain)?;
    if !(eps0 > 0.0) {
        return Err(Error::InvalidConfig("eps0 must be positive".into()));
    }
    let mut stream = Proposals::new(flow, seed, cap);
    let (points, thresholds) = filtered_select(&mut stream, data, n, domain, |_| eps0)?;
    Ok(DesignBatch {
        shortfall: points.len() < n,
        points,
        thresholds,
        proposals: stream.drawn,
        beta: None,
    })
}

/// Flow samples kept only when at least `eps0` (L∞) from every data point and
/// every point already accepted in this batch.
pub fn nfbd_fg_select(
    flow: &NormalizingFlow,
    data: &[Vec<f64>],
    n: usize,
    eps0: f64,
    domain: &BoxDomain,
    seed: u64,
) -> Result<DesignBatch> {
    nfbd_fg_select_capped(flow, data, n, eps0, domain, seed, DEFAULT_PROPOSAL_CAP)
}

/// `clamp(β·p^(−2/d), 0.1ε0, 10ε0)` from log-values, so tiny densities do not
/// underflow. `log_p = −∞` gives the upper clamp.
pub fn adaptive_threshold_log(log_p: f64, eps0: f64, log_beta: f64, d: usize) -> f64 {
    let (lo, hi) = (0.1 * eps0, 10.0 * eps0);
    if log_p == f64::NEG_INFINITY {
        return hi;
    }
    let raw = (log_beta - 2.0 / d as f64 * log_p).exp();
    raw.clamp(lo, hi)
}

/// `clamp(β·p_X(z)^(−2/d), 0.1ε0, 10ε0)`; `p_X(z) = 0` gives `10ε0`.
pub fn adaptive_threshold(pdf: f64, eps0: f64, beta: f64, d: usize) -> f64 {
    adaptive_threshold_log(pdf.ln(), eps0, beta.ln(), d)
}

/// `ln β = ln ε0 + (2/d)·ln p_med` where `p_med` is the lower median of the
/// log-densities.
pub fn calibrate_log_beta(log_pdfs: &[f64], eps0: f64, d: usize) -> Result<f64> {
    if log_pdfs.is_empty() {
        return Err(Error::InvalidConfig("β calibration needs at least one sample".into()));
    }
    let mut sorted = log_pdfs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];
    Ok(eps0.ln() + 2.0 / d as f64 * median)
}

#[allow(clippy::too_many_arguments)]
fn nfbd_ag_select_capped<P>(
    flow: &NormalizingFlow,
    data: &[Vec<f64>],
    n: usize,
    eps0: f64,
    log_pdf: P,
    domain: &BoxDomain,
    seed: u64,
    cap: usize,
    calibration: usize,
) -> Result<DesignBatch>
where
    P: Fn(&[f64]) -> f64,
{
    check_n(n, flow, domain)?;
    if !(eps0 > 0.0) {
        return Err(Error::InvalidConfig("eps0 must be positive".into()));
    }
    let d = domain.dim();
    let calib_seed = crate::rng::derive_seed(seed, &[0xCA1B]);
    let mut calib: Vec<f64> = flow
        .sample_with(calibration.max(1), &mut seeded(calib_seed))?
        .to_rows()
        .iter()
        .filter(|z| domain.contains(z))
        .map(|z| log_pdf(z))
        .collect();
    if calib.is_empty() {
        // nothing of the calibration sample is in the box; fall back to the centre
        calib.push(log_pdf(&domain.center()));
    }
    let log_beta = calibrate_log_beta(&calib, eps0, d)?;
    let mut stream = Proposals::new(flow, seed, cap);
    let (points, thresholds) = filtered_select(&mut stream, data, n, domain, |z| {
        adaptive_threshold_log(log_pdf(z), eps0, log_beta, d)
    })?;
    Ok(DesignBatch {
        shortfall: points.len() < n,
        points,
        thresholds,
        proposals: stream.drawn,
        beta: Some(log_beta.exp()),
    })
}

/// As [`nfbd_fg_select`] with a per-proposal threshold that grows where the
/// input density is small. β is calibrated on 1024 fresh flow samples so the
/// median-density point gets exactly `eps0`.
pub fn nfbd_ag_select<P>(
    flow: &NormalizingFlow,
    data: &[Vec<f64>],
    n: usize,
    eps0: f64,
    log_pdf: P,
    domain: &BoxDomain,
    seed: u64,
) -> Result<DesignBatch>
where
    P: Fn(&[f64]) -> f64,
{
    nfbd_ag_select_capped(flow, data, n, eps0, log_pdf, domain, seed, DEFAULT_PROPOSAL_CAP, DEFAULT_CALIBRATION)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::AffineMap;
    use crate::problems::InputDensity;
    use proptest::prelude::*;

    fn box2() -> BoxDomain {
        BoxDomain::cube(2, -10.0, 10.0)
    }

    fn identity_flow(domain: &BoxDomain) -> NormalizingFlow {
        NormalizingFlow::identity(domain.dim(), 2, &[4], 4.0, AffineMap::from_box(domain, 3.0), 0).unwrap()
    }

    #[test]
    fn rho_examples() {
        let data = vec![vec![1.0, 2.0], vec![3.0, 0.0]];
        assert_eq!(rho(&[0.0, 0.0], &data).unwrap(), 2.0);
        assert_eq!(rho(&[1.0, 2.0], &data).unwrap(), 0.0);
        assert_eq!(rho(&[0.5, -4.0], &[vec![1.0, 1.0]]).unwrap(), 5.0);
        assert!(matches!(rho(&[0.0], &[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn nfbd_basics() {
        let b = box2();
        let f = identity_flow(&b);
        let batch = nfbd_select(&f, 7, &b, 3).unwrap();
        assert_eq!(batch.len(), 7);
        assert!(batch.points.iter().all(|p| b.contains(p)));
        assert_eq!(nfbd_select(&f, 1, &b, 3).unwrap().len(), 1);
        assert_eq!(batch, nfbd_select(&f, 7, &b, 3).unwrap());
        assert!(nfbd_select(&f, 0, &b, 3).is_err());
    }

    #[test]
    fn nfbd_cap_is_an_error() {
        let b = box2();
        // the flow's mass sits far outside a small box
        let tiny = BoxDomain::cube(2, 50.0, 50.1);
        let f = identity_flow(&b);
        let r = nfbd_select_capped(&f, 2, &tiny, 0, 500);
        assert!(matches!(r, Err(Error::ProposalCapExhausted { cap: 500, found: 0, wanted: 2 })));
    }

    #[test]
    fn fg_tiny_threshold_accepts_first_proposals() {
        let b = box2();
        let f = identity_flow(&b);
        let data = vec![vec![9.9, 9.9]];
        let fg = nfbd_fg_select(&f, &data, 5, 1e-9, &b, 8).unwrap();
        let plain = nfbd_select(&f, 5, &b, 8).unwrap();
        assert_eq!(fg.points, plain.points);
        assert!(!fg.shortfall);
        assert_eq!(fg.thresholds, vec![1e-9; 5]);
    }

    #[test]
    fn fg_huge_threshold_gives_shortfall() {
        let b = box2();
        let f = identity_flow(&b);
        let data = vec![vec![0.0, 0.0]];
        let fg = nfbd_fg_select_capped(&f, &data, 3, 2.0 * b.diameter() + 1.0, &b, 1, 2000).unwrap();
        assert!(fg.is_empty());
        assert!(fg.shortfall);
        assert_eq!(fg.proposals, 2000);
    }

    #[test]
    fn threshold_clamps_and_median() {
        let eps0 = 0.5;
        let d = 2;
        let p_med: f64 = 0.05;
        let beta = eps0 * p_med.powf(2.0 / d as f64);
        assert!((adaptive_threshold(p_med, eps0, beta, d) - eps0).abs() < 1e-12);
        assert_eq!(adaptive_threshold(0.0, eps0, beta, d), 10.0 * eps0);
        assert_eq!(adaptive_threshold(1e300, eps0, beta, d), 0.1 * eps0);
        let lb = calibrate_log_beta(&[-3.0, -1.0, -2.0, -7.0], eps0, d).unwrap();
        assert!((lb - (eps0.ln() - 3.0)).abs() < 1e-12);
    }

    #[test]
    fn ag_uniform_density_matches_fg() {
        let b = box2();
        let f = identity_flow(&b);
        let uniform = InputDensity::Uniform { domain: b.clone() };
        let data = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let ag = nfbd_ag_select(&f, &data, 6, 0.7, |z| uniform.log_pdf(z), &b, 5).unwrap();
        let fg = nfbd_fg_select(&f, &data, 6, 0.7, &b, 5).unwrap();
        assert_eq!(ag.points, fg.points);
        assert!(ag.thresholds.iter().all(|t| (t - 0.7).abs() < 1e-12));
    }

    #[test]
    fn ag_tail_points_get_larger_thresholds() {
        let b = box2();
        let f = identity_flow(&b);
        let gauss = InputDensity::StandardNormal { dim: 2 };
        let ag = nfbd_ag_select(&f, &[vec![0.0, 0.0]], 40, 0.3, |z| gauss.log_pdf(z), &b, 2).unwrap();
        let mut pairs: Vec<(f64, f64)> = ag
            .points
            .iter()
            .zip(&ag.thresholds)
            .map(|(p, t)| (p[0] * p[0] + p[1] * p[1], *t))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pairs.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-12);
        }
        assert!(pairs.last().unwrap().1 > pairs[0].1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fg_separation_holds(seed in any::<u64>(), eps0 in 0.1f64..3.0, n in 1usize..12) {
            let b = box2();
            let f = identity_flow(&b);
            let data = crate::mc::lhs_sample(6, &b, seed);
            let batch = nfbd_fg_select(&f, &data, n, eps0, &b, seed).unwrap();
            let all: Vec<&Vec<f64>> = data.iter().chain(&batch.points).collect();
            for i in data.len()..all.len() {
                for j in 0..i {
                    prop_assert!(linf(all[i], all[j]) >= eps0);
                }
            }
        }

        #[test]
        fn ag_threshold_bounds_and_separation(seed in any::<u64>(), eps0 in 0.1f64..2.0) {
            let b = box2();
            let f = identity_flow(&b);
            let gauss = InputDensity::StandardNormal { dim: 2 };
            let data = crate::mc::lhs_sample(5, &b, seed);
            let batch = nfbd_ag_select(&f, &data, 8, eps0, |z| gauss.log_pdf(z), &b, seed).unwrap();
            for (k, (p, t)) in batch.points.iter().zip(&batch.thresholds).enumerate() {
                prop_assert!(*t >= 0.1 * eps0 - 1e-12 && *t <= 10.0 * eps0 + 1e-12);
                let before: Vec<Vec<f64>> = data.iter().chain(&batch.points[..k]).cloned().collect();
                prop_assert!(rho(p, &before).unwrap() >= *t);
            }
        }
    }
}
