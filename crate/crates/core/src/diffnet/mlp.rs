use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{affine_rows, swish_slice, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Hidden-layer activation. The output layer is always the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
}

/// One dense layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// Feed-forward network parameters: Swish on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub activation: Activation,
    layers: Vec<DenseLayer>,
}

/// Tape handles for each layer's (weights, bias).
pub type ParamVars = Vec<(Var, Var)>;

impl MlpParams {
    /// Builds a network from explicit layers, checking that widths chain and
    /// every value is finite.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::DimensionMismatch {
                    expected: w[0].outputs,
                    got: w[1].inputs,
                });
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::Checkpoint(format!(
                    "layer {}x{} has {} weights and {} biases",
                    l.outputs,
                    l.inputs,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameter".into()));
            }
        }
        Ok(Self {
            activation: Activation::Swish,
            layers,
        })
    }

    /// Fan-in scaled uniform initialization: weights ~ U(-√(3/fan_in), √(3/fan_in)),
    /// zero biases.
    pub fn init(input: usize, hidden: &[usize], output: usize, rng: &mut Rng) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = (3.0 / w[0] as f64).sqrt();
                let mut layer = DenseLayer::zeros(w[0], w[1]);
                layer
                    .weights
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
                layer
            })
            .collect();
        Self {
            activation: Activation::Swish,
            layers,
        }
    }

    /// Zeroes the last layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty network");
        last.weights.iter_mut().for_each(|v| *v = 0.0);
        last.bias.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameter buffers in a fixed order: w0, b0, w1, b1, ...
    pub fn buffers(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| [&l.weights, &l.bias]).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    /// Batched forward pass without recording a tape.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (k, l) in self.layers.iter().enumerate() {
            h = affine_rows(&h, &l.weights, &l.bias, l.outputs);
            if k < last {
                swish_slice(h.data_mut());
            }
        }
        Ok(h)
    }

    /// Forward pass for a single input, returning the full output vector.
    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::from_vec(1, x.len(), x.to_vec());
        Ok(self.forward_batch(&t)?.into_data())
    }

    /// Places the parameters on `tape` as leaves.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> ParamVars {
        self.layers
            .iter()
            .map(|l| {
                let w = tape.leaf(
                    Tensor::from_vec(l.outputs, l.inputs, l.weights.clone()),
                    requires_grad,
                );
                let b = tape.leaf(Tensor::from_vec(1, l.outputs, l.bias.clone()), requires_grad);
                (w, b)
            })
            .collect()
    }

    /// Records the forward pass on `tape` using previously registered parameters.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
        let last = vars.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in vars.iter().enumerate() {
            h = tape.linear(h, w, b);
            if k < last {
                h = tape.swish(h);
            }
        }
        h
    }
}

/// Appends gradients for registered parameters in [`MlpParams::buffers`]
/// order; parameters the loss does not touch get zeros.
pub fn collect_grads(
    grads: &crate::autodiff::Gradients,
    params: &MlpParams,
    vars: &ParamVars,
    out: &mut Vec<Vec<f64>>,
) {
    for (l, &(w, b)) in params.layers.iter().zip(vars) {
        out.push(grads.data_or_zeros(w, l.weights.len()));
        out.push(grads.data_or_zeros(b, l.bias.len()));
    }
}

/// Scalar forward pass `W⁽ᴸ⁾a⁽ᴸ⁾ + b⁽ᴸ⁾` of a single-output network.
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<f64> {
    if params.output_dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: params.output_dim(),
        });
    }
    if x.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            got: x.len(),
        });
    }
    Ok(params.forward_vec(x)?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn single(w: f64, b: f64) -> DenseLayer {
        DenseLayer {
            inputs: 1,
            outputs: 1,
            weights: vec![w],
            bias: vec![b],
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = MlpParams::init(3, &[4, 4], 1, &mut seeded(0));
        p.buffers_mut()
            .into_iter()
            .for_each(|b| b.iter_mut().for_each(|v| *v = 0.0));
        assert_eq!(mlp_forward(&p, &[1.0, -2.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn affine_single_layer() {
        let p = MlpParams::from_layers(vec![single(2.0, 1.0)]).unwrap();
        assert_eq!(mlp_forward(&p, &[3.0]).unwrap(), 7.0);
    }

    #[test]
    fn one_hidden_unit_is_swish() {
        let p = MlpParams::from_layers(vec![single(1.0, 0.0), single(1.0, 0.0)]).unwrap();
        let y = mlp_forward(&p, &[1.0]).unwrap();
        assert!((y - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = MlpParams::init(2, &[3], 1, &mut seeded(1));
        assert!(matches!(
            mlp_forward(&p, &[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        let bad = vec![DenseLayer::zeros(2, 3), DenseLayer::zeros(4, 1)];
        assert!(MlpParams::from_layers(bad).is_err());
    }

    #[test]
    fn tape_and_direct_paths_agree() {
        let p = MlpParams::init(2, &[8, 8], 3, &mut seeded(7));
        let x = Tensor::from_vec(2, 2, vec![0.1, -0.4, 1.5, 0.3]);
        let direct = p.forward_batch(&x).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape, false);
        let xv = tape.constant(x);
        let y = p.forward_tape(&mut tape, &vars, xv);
        assert_eq!(tape.value(y), &direct);
    }
}
