//! Affine-coupling normalizing flows from a standard Gaussian base, trained
//! against an unnormalized log-density by minimizing the free energy
//! `F = E_q0[ln q0(z0) − Σ ln|det ∂f_k| − ln p̃(z_K)]`.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::diffnet::{adam_step, collect_grads, AdamConfig, AdamState, MlpParams, ParamVars};
use crate::error::{Error, Result};
use crate::problems::BoxDomain;
use crate::rng::{seeded, Rng};

const CHECKPOINT_FORMAT: &str = "dnf-flow";
const CHECKPOINT_VERSION: u32 = 1;

/// Differentiable unnormalized log-density used as a training target.
pub trait LogTarget: Sync {
    fn dim(&self) -> usize;

    /// Log-density values and their gradients for every row of `x`.
    fn log_density_batch(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)>;
}

/// Diagonal Gaussian log-density (normalized).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianTarget {
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| -0.5 * ((v - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln())
            .sum()
    }
}

impl LogTarget for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density_batch(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut grad = Tensor::zeros(x.rows(), x.cols());
        let mut values = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            values.push(self.log_density(row));
            for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
                *g = -(row[j] - self.mean[j]) / self.std[j].powi(2);
            }
        }
        Ok((values, grad))
    }
}

/// Standard Gaussian log-density.
pub fn base_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

/// Fixed elementwise output map `x = shift + scale ⊙ z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Maps ±`sigmas` base standard deviations onto the box edges.
    pub fn from_box(domain: &BoxDomain, sigmas: f64) -> Self {
        Self {
            shift: domain.center(),
            scale: domain.half_widths().iter().map(|h| h / sigmas).collect(),
        }
    }

    pub fn log_det(&self) -> f64 {
        self.scale.iter().map(|s| s.abs().ln()).sum()
    }

    fn apply(&self, z: &mut [f64]) {
        for ((v, s), b) in z.iter_mut().zip(&self.scale).zip(&self.shift) {
            *v = *v * s + b;
        }
    }

    fn invert(&self, x: &mut [f64]) {
        for ((v, s), b) in x.iter_mut().zip(&self.scale).zip(&self.shift) {
            *v = (*v - b) / s;
        }
    }
}

/// Affine coupling layer: coordinates with `mask = true` pass through and
/// condition the scale/shift applied to the rest,
/// `y_B = x_B ⊙ exp(s(x_A)) + t(x_A)` with `s = s_max·tanh(raw/s_max)`.
///
/// One conditioner network produces both halves: its first `|B|` outputs
/// are the raw log-scales and the remaining `|B|` are the shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub mask: Vec<bool>,
    pub conditioner: MlpParams,
    pub s_max: f64,
}

struct LayerVars {
    net: ParamVars,
}

impl CouplingLayer {
    /// Alternating parity mask for layer `index`.
    pub fn alternating_mask(dim: usize, index: usize) -> Vec<bool> {
        (0..dim).map(|i| (i + index) % 2 == 0).collect()
    }

    pub fn new(mask: Vec<bool>, hidden: &[usize], s_max: f64, rng: &mut Rng) -> Result<Self> {
        let fixed = mask.iter().filter(|&&m| m).count();
        if fixed == 0 || fixed == mask.len() {
            return Err(Error::InvalidConfig("coupling mask must be mixed".into()));
        }
        if !(s_max > 0.0) {
            return Err(Error::InvalidConfig("s_max must be positive".into()));
        }
        let free = mask.len() - fixed;
        Ok(Self {
            conditioner: MlpParams::init(fixed, hidden, 2 * free, rng),
            mask,
            s_max,
        })
    }

    pub fn fixed(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn transformed(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    fn squash(&self, raw: f64) -> f64 {
        self.s_max * (raw / self.s_max).tanh()
    }

    fn conditioners(&self, x: &Tensor, fixed: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut a = Tensor::zeros(x.rows(), fixed.len());
        for i in 0..x.rows() {
            for (j, &c) in fixed.iter().enumerate() {
                a.row_mut(i)[j] = x.row(i)[c];
            }
        }
        let out = self.conditioner.forward_batch(&a)?;
        let free = out.cols() / 2;
        let mut s = Tensor::zeros(x.rows(), free);
        let mut t = Tensor::zeros(x.rows(), free);
        for i in 0..x.rows() {
            let (raw, shift) = out.row(i).split_at(free);
            for (v, r) in s.row_mut(i).iter_mut().zip(raw) {
                *v = self.squash(*r);
            }
            t.row_mut(i).copy_from_slice(shift);
        }
        Ok((s, t))
    }

    /// Forward pass in place; adds each row's log-det to `log_det`.
    fn forward_inplace(&self, x: &mut Tensor, log_det: &mut [f64]) -> Result<()> {
        let fixed = self.fixed();
        let free = self.transformed();
        let (s, t) = self.conditioners(x, &fixed)?;
        for i in 0..x.rows() {
            let row = x.row_mut(i);
            for (j, &c) in free.iter().enumerate() {
                let sij = s.row(i)[j];
                row[c] = row[c] * sij.exp() + t.row(i)[j];
                log_det[i] += sij;
            }
        }
        Ok(())
    }

    /// Inverse pass in place; adds each row's inverse log-det (`−Σ s`).
    fn inverse_inplace(&self, y: &mut Tensor, log_det: &mut [f64]) -> Result<()> {
        let fixed = self.fixed();
        let free = self.transformed();
        let (s, t) = self.conditioners(y, &fixed)?;
        for i in 0..y.rows() {
            let row = y.row_mut(i);
            for (j, &c) in free.iter().enumerate() {
                let sij = s.row(i)[j];
                row[c] = (row[c] - t.row(i)[j]) * (-sij).exp();
                log_det[i] -= sij;
            }
        }
        Ok(())
    }

    fn register(&self, tape: &mut Tape) -> LayerVars {
        LayerVars {
            net: self.conditioner.register(tape, true),
        }
    }

    /// Records the forward pass; returns the output and the n×1 log-det column.
    fn record(&self, tape: &mut Tape, vars: &LayerVars, x: Var) -> (Var, Var) {
        let fixed = self.fixed();
        let free = self.transformed();
        let a = tape.select_cols(x, &fixed);
        let b = tape.select_cols(x, &free);
        let out = self.conditioner.forward_tape(tape, &vars.net, a);
        let k = free.len();
        let raw_cols: Vec<usize> = (0..k).collect();
        let shift_cols: Vec<usize> = (k..2 * k).collect();
        let raw = tape.select_cols(out, &raw_cols);
        let t = tape.select_cols(out, &shift_cols);
        let scaled = tape.scale(raw, 1.0 / self.s_max);
        let th = tape.tanh(scaled);
        let s = tape.scale(th, self.s_max);
        let es = tape.exp(s);
        let bs = tape.mul(b, es);
        let nb = tape.add(bs, t);
        let y = tape.merge_cols(&[(a, &fixed), (nb, &free)], self.mask.len());
        let ld = tape.sum_cols(s);
        (y, ld)
    }
}

/// Composition of coupling layers followed by a fixed affine output map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizingFlow {
    dim: usize,
    pub layers: Vec<CouplingLayer>,
    pub output: AffineMap,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    flow: NormalizingFlow,
}

impl NormalizingFlow {
    /// Flow whose conditioners have zeroed output layers, so it represents
    /// exactly the base Gaussian pushed through `output`.
    pub fn identity(dim: usize, layers: usize, hidden: &[usize], s_max: f64, output: AffineMap, seed: u64) -> Result<Self> {
        let mut flow = Self::random(dim, layers, hidden, s_max, seed)?;
        for l in &mut flow.layers {
            l.conditioner.zero_output_layer();
        }
        flow.set_output(output)?;
        Ok(flow)
    }

    /// Flow with every conditioner weight randomly initialized.
    pub fn random(dim: usize, layers: usize, hidden: &[usize], s_max: f64, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidConfig("coupling flows need dimension ≥ 2".into()));
        }
        let mut rng = seeded(seed);
        let layers = (0..layers)
            .map(|k| CouplingLayer::new(CouplingLayer::alternating_mask(dim, k), hidden, s_max, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            layers,
            output: AffineMap::identity(dim),
        })
    }

    pub fn set_output(&mut self, output: AffineMap) -> Result<()> {
        if output.shift.len() != self.dim || output.scale.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: output.scale.len(),
            });
        }
        if output.scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(Error::InvalidConfig("output scale must be finite and non-zero".into()));
        }
        self.output = output;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.conditioner.num_params())
            .sum()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.conditioner.buffers_mut())
            .collect()
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: cols,
            });
        }
        Ok(())
    }

    /// Pushes base points through the flow; returns images and log|det J|.
    pub fn forward_batch(&self, z0: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check(z0.cols())?;
        let mut x = z0.clone();
        let mut ld = vec![self.output.log_det(); x.rows()];
        for l in &self.layers {
            l.forward_inplace(&mut x, &mut ld)?;
        }
        for i in 0..x.rows() {
            self.output.apply(x.row_mut(i));
        }
        Ok((x, ld))
    }

    /// Pulls points back to the base; returns base points and the inverse log-det.
    pub fn inverse_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check(x.cols())?;
        let mut z = x.clone();
        for i in 0..z.rows() {
            self.output.invert(z.row_mut(i));
        }
        let mut ld = vec![-self.output.log_det(); z.rows()];
        for l in self.layers.iter().rev() {
            l.inverse_inplace(&mut z, &mut ld)?;
        }
        Ok((z, ld))
    }

    pub fn forward(&self, z0: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (x, ld) = self.forward_batch(&Tensor::from_vec(1, z0.len(), z0.to_vec()))?;
        Ok((x.into_data(), ld[0]))
    }

    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_with_log_det(x)?.0)
    }

    pub fn inverse_with_log_det(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.inverse_batch(&Tensor::from_vec(1, x.len(), x.to_vec()))?;
        Ok((z.into_data(), ld[0]))
    }

    /// `ln q(x) = ln q0(f⁻¹(x)) − ln|det ∂f/∂z0|` evaluated at `f⁻¹(x)`.
    pub fn log_density_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (z, inv_ld) = self.inverse_batch(x)?;
        Ok((0..z.rows())
            .map(|i| base_log_density(z.row(i)) + inv_ld[i])
            .collect())
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_density_batch(&Tensor::from_vec(1, x.len(), x.to_vec()))?[0])
    }

    /// Draws `n` base points from `rng` and maps them forward.
    pub fn sample_with(&self, n: usize, rng: &mut Rng) -> Result<Tensor> {
        let z0: Vec<f64> = (0..n * self.dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(self.forward_batch(&Tensor::from_vec(n, self.dim, z0))?.0)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        Ok(self.sample_with(n, &mut seeded(seed))?.to_rows())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            flow: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported flow checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let flow = ck.flow;
        for l in &flow.layers {
            if l.mask.len() != flow.dim {
                return Err(Error::Checkpoint("mask length differs from flow dimension".into()));
            }
            let net = MlpParams::from_layers(l.conditioner.layers().to_vec())?;
            let fixed = l.mask.iter().filter(|&&m| m).count();
            if net.input_dim() != fixed || net.output_dim() != 2 * (l.mask.len() - fixed) {
                return Err(Error::Checkpoint("conditioner shape does not match mask".into()));
            }
        }
        Ok(flow)
    }
}

/// Flow training settings. The default of 500 Adam steps keeps one DNF
/// iteration to a few seconds on a single core. On the benchmark targets
/// over 95% of the objective's total decrease happens in those steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainConfig {
    pub layers: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub s_max: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            hidden: vec![64, 64],
            batch_size: 256,
            steps: 500,
            learning_rate: 1e-3,
            seed: 0,
            s_max: 4.0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::InvalidConfig("flow needs at least 2 coupling layers".into()));
        }
        if self.batch_size < 16 {
            return Err(Error::InvalidConfig("flow batch size must be at least 16".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("conditioner widths must be positive".into()));
        }
        if !(self.s_max > 0.0) {
            return Err(Error::InvalidConfig("s_max must be positive".into()));
        }
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
        .validate()
    }
}

/// Objective history of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainReport {
    /// Mini-batch free-energy estimate at every step.
    pub objective: Vec<f64>,
}

impl FlowTrainReport {
    fn decile_mean(&self, last: bool) -> f64 {
        let n = self.objective.len();
        let k = (n / 10).max(1).min(n);
        let slice = if last { &self.objective[n - k..] } else { &self.objective[..k] };
        slice.iter().sum::<f64>() / k as f64
    }

    pub fn first_decile_mean(&self) -> f64 {
        self.decile_mean(false)
    }

    pub fn last_decile_mean(&self) -> f64 {
        self.decile_mean(true)
    }
}

/// Records the batch free energy on a tape and returns the scalar node.
fn record_objective(
    flow: &NormalizingFlow,
    tape: &mut Tape,
    vars: &[LayerVars],
    z0: Tensor,
    target: &dyn LogTarget,
) -> Result<Var> {
    let n = z0.rows();
    let log_q0: Vec<f64> = (0..n).map(|i| base_log_density(z0.row(i))).collect();
    let mut h = tape.constant(z0);
    let mut log_det: Option<Var> = None;
    for (layer, v) in flow.layers.iter().zip(vars) {
        let (y, ld) = layer.record(tape, v, h);
        h = y;
        log_det = Some(match log_det {
            Some(acc) => tape.add(acc, ld),
            None => ld,
        });
    }
    let x = tape.affine_cols(h, &flow.output.scale, &flow.output.shift);
    let (values, grad) = target.log_density_batch(tape.value(x))?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(format!("target log-density is not finite at batch row {i}")));
    }
    let log_p = tape.row_function(x, values, grad);
    let q0 = tape.constant(Tensor::from_vec(n, 1, log_q0));
    let shifted = tape.offset(q0, -flow.output.log_det());
    let mut per_row = tape.sub(shifted, log_p);
    if let Some(ld) = log_det {
        per_row = tape.sub(per_row, ld);
    }
    Ok(tape.mean(per_row))
}

/// Monte Carlo estimate of the free energy with `n` base draws.
pub fn free_energy(flow: &NormalizingFlow, target: &dyn LogTarget, n: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let z0: Vec<f64> = (0..n * flow.dim).map(|_| rng.sample(StandardNormal)).collect();
    let (x, ld) = flow.forward_batch(&Tensor::from_vec(n, flow.dim, z0.clone()))?;
    let (lp, _) = target.log_density_batch(&x)?;
    let z0 = Tensor::from_vec(n, flow.dim, z0);
    Ok((0..n)
        .map(|i| base_log_density(z0.row(i)) - ld[i] - lp[i])
        .sum::<f64>()
        / n as f64)
}

/// Fits a flow, starting from the identity, to `target` by Adam on the
/// reparameterized free energy.
pub fn train_flow(
    target: &dyn LogTarget,
    config: &FlowTrainConfig,
    output: AffineMap,
) -> Result<(NormalizingFlow, FlowTrainReport)> {
    config.validate()?;
    let d = target.dim();
    let mut flow = NormalizingFlow::identity(d, config.layers, &config.hidden, config.s_max, output, config.seed)?;
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut rng = seeded(crate::rng::derive_seed(config.seed, &[0xF10E]));
    let mut objective = Vec::with_capacity(config.steps);
    let mut grads = Vec::new();

    for step in 0..config.steps {
        let z0: Vec<f64> = (0..config.batch_size * d)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<LayerVars> = flow.layers.iter().map(|l| l.register(&mut tape)).collect();
        let loss = record_objective(&flow, &mut tape, &vars, Tensor::from_vec(config.batch_size, d, z0), target)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NumericalFailure(format!("flow objective diverged at step {step}")));
        }
        objective.push(value);
        let g = tape.backward(loss)?;
        grads.clear();
        for (l, v) in flow.layers.iter().zip(&vars) {
            collect_grads(&g, &l.conditioner, &v.net, &mut grads);
        }
        adam_step(&mut flow.buffers_mut(), &grads, &mut state, &adam)?;
    }
    Ok((flow, FlowTrainReport { objective }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::DenseLayer;

    fn constant_net(inputs: usize, values: &[f64]) -> MlpParams {
        MlpParams::from_layers(vec![DenseLayer {
            inputs,
            outputs: values.len(),
            weights: vec![0.0; inputs * values.len()],
            bias: values.to_vec(),
        }])
        .unwrap()
    }

    fn single_affine_layer(c: f64, b: f64) -> NormalizingFlow {
        NormalizingFlow {
            dim: 2,
            layers: vec![CouplingLayer {
                mask: vec![true, false],
                // s_max large enough that the squash is numerically the identity
                conditioner: constant_net(1, &[c, b]),
                s_max: 1e9,
            }],
            output: AffineMap::identity(2),
        }
    }

    #[test]
    fn identity_flow_is_identity() {
        let f = NormalizingFlow::identity(2, 4, &[8], 4.0, AffineMap::identity(2), 1).unwrap();
        let (z, ld) = f.forward(&[0.3, -1.7]).unwrap();
        assert_eq!(z, vec![0.3, -1.7]);
        assert_eq!(ld, 0.0);
        assert_eq!(f.inverse(&[2.0, 5.0]).unwrap(), vec![2.0, 5.0]);
        let lp = f.log_density(&[0.0, 0.0]).unwrap();
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((lp + 1.837_877).abs() < 1e-6);
        let x = [0.4, -2.2];
        assert!((f.log_density(&x).unwrap() - base_log_density(&x)).abs() < 1e-12);
    }

    #[test]
    fn single_affine_coupling_closed_form() {
        let (c, b) = (0.7, -1.3);
        let f = single_affine_layer(c, b);
        let (y, ld) = f.forward(&[0.5, 2.0]).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
        assert!((y[1] - (c.exp() * 2.0 + b)).abs() < 1e-12);
        assert!((ld - c).abs() < 1e-12);
        let back = f.inverse(&[0.5, 3.0]).unwrap();
        assert!((back[1] - (3.0 - b) * (-c).exp()).abs() < 1e-12);
    }

    #[test]
    fn mixed_masks_required() {
        let mut rng = seeded(0);
        assert!(CouplingLayer::new(vec![true, true], &[4], 4.0, &mut rng).is_err());
        assert!(CouplingLayer::new(vec![false, false], &[4], 4.0, &mut rng).is_err());
        assert!(NormalizingFlow::random(1, 2, &[4], 4.0, 0).is_err());
    }

    #[test]
    fn sampling_is_seeded_and_handles_zero() {
        let f = NormalizingFlow::random(2, 3, &[8], 4.0, 2).unwrap();
        assert_eq!(f.sample(7, 9).unwrap(), f.sample(7, 9).unwrap());
        assert!(f.sample(0, 9).unwrap().is_empty());
    }

    #[test]
    fn identity_samples_are_standard_normal() {
        let f = NormalizingFlow::identity(2, 2, &[4], 4.0, AffineMap::identity(2), 3).unwrap();
        let n = 20_000;
        let s = f.sample(n, 4).unwrap();
        for j in 0..2 {
            let m = s.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            assert!(m.abs() < 4.0 / (n as f64).sqrt());
        }
    }

    #[test]
    fn objective_at_identity_matches_zero_kl() {
        let f = NormalizingFlow::identity(2, 2, &[4], 4.0, AffineMap::identity(2), 3).unwrap();
        let fe = free_energy(&f, &GaussianTarget::standard(2), 4096, 1).unwrap();
        assert!(fe.abs() < 1e-12);
    }

    #[test]
    fn training_objective_tape_gradient_matches_finite_differences() {
        let flow = NormalizingFlow::random(2, 2, &[4], 4.0, 5).unwrap();
        let target = GaussianTarget {
            mean: vec![1.0, -0.5],
            std: vec![0.7, 1.3],
        };
        let z0 = Tensor::from_vec(3, 2, vec![0.1, -0.3, 1.2, 0.4, -0.8, 0.9]);
        let eval = |f: &NormalizingFlow| {
            let mut t = Tape::new();
            let vars: Vec<LayerVars> = f.layers.iter().map(|l| l.register(&mut t)).collect();
            let loss = record_objective(f, &mut t, &vars, z0.clone(), &target).unwrap();
            let v = t.value(loss).data()[0];
            let g = t.backward(loss).unwrap();
            let mut grads = Vec::new();
            for (l, lv) in f.layers.iter().zip(&vars) {
                collect_grads(&g, &l.conditioner, &lv.net, &mut grads);
            }
            (v, grads)
        };
        let (_, grads) = eval(&flow);
        let h = 1e-6;
        for (bi, gb) in grads.iter().enumerate() {
            for k in 0..gb.len() {
                let mut fp = flow.clone();
                fp.buffers_mut()[bi][k] += h;
                let mut fm = flow.clone();
                fm.buffers_mut()[bi][k] -= h;
                let fd = (eval(&fp).0 - eval(&fm).0) / (2.0 * h);
                assert!((fd - gb[k]).abs() <= 1e-6 * fd.abs().max(1.0), "{bi}/{k}: {fd} vs {}", gb[k]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut f = NormalizingFlow::random(3, 3, &[5], 4.0, 8).unwrap();
        f.set_output(AffineMap::from_box(&BoxDomain::cube(3, -10.0, 10.0), 3.0)).unwrap();
        let back = NormalizingFlow::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn box_map_covers_box_at_three_sigma() {
        let m = AffineMap::from_box(&BoxDomain::new(vec![-10.0, 0.0], vec![10.0, 4.0]).unwrap(), 3.0);
        let mut z = vec![3.0, -3.0];
        m.apply(&mut z);
        assert!((z[0] - 10.0).abs() < 1e-12 && (z[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(FlowTrainConfig { layers: 1, ..Default::default() }.validate().is_err());
        assert!(FlowTrainConfig { batch_size: 8, ..Default::default() }.validate().is_err());
        assert!(FlowTrainConfig::default().validate().is_ok());
    }
}
