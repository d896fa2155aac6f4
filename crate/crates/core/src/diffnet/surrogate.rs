use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::data::{Dataset, Standardizer};
use super::mlp::{collect_grads, MlpParams};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::seeded;

const CHECKPOINT_FORMAT: &str = "dnf-surrogate";
const CHECKPOINT_VERSION: u32 = 1;
const EVAL_CHUNK: usize = 4096;

/// Surrogate training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Mini-batch size; values at or above the dataset size give full-batch training.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            epochs: 3000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epoch count must be positive".into()));
        }
        self.adam().validate()
    }
}

/// Training bookkeeping stored with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Mean squared error in standardized output units before the first step.
    pub initial_loss: f64,
    /// Mean squared error in standardized output units of the returned parameters.
    pub final_loss: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Trained approximation `G(x)` of the limit-state function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub params: MlpParams,
    pub standardizer: Standardizer,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: SurrogateModel,
}

/// `(1/N) Σ (y_i − NN(x_i))²` in the data's own units.
pub fn mse_loss(params: &MlpParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let x = Tensor::from_rows(data.inputs(), data.dim());
    let pred = params.forward_batch(&x)?;
    if pred.cols() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: pred.cols(),
        });
    }
    let sse: f64 = pred
        .data()
        .iter()
        .zip(data.outputs())
        .map(|(p, y)| (y - p).powi(2))
        .sum();
    Ok(sse / data.len() as f64)
}

impl SurrogateModel {
    /// Wraps explicit parameters (no training metadata).
    pub fn from_params(params: MlpParams, standardizer: Standardizer) -> Result<Self> {
        if params.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: params.output_dim(),
            });
        }
        if standardizer.input_mean.len() != params.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.input_dim(),
                got: standardizer.input_mean.len(),
            });
        }
        Ok(Self {
            params,
            standardizer,
            meta: TrainingMeta {
                initial_loss: f64::NAN,
                final_loss: f64::NAN,
                epochs: 0,
                seed: 0,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.params.input_dim()
    }

    fn standardize_rows(&self, x: &Tensor) -> Tensor {
        let s = &self.standardizer;
        let mut u = x.clone();
        for i in 0..u.rows() {
            for (j, v) in u.row_mut(i).iter_mut().enumerate() {
                *v = (*v - s.input_mean[j]) / s.input_std[j];
            }
        }
        u
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let u = self.standardizer.transform_input(x);
        let v = self.params.forward_vec(&u)?[0];
        Ok(self.standardizer.inverse_output(v))
    }

    /// Evaluates every row of `x`; chunks run in parallel and are
    /// concatenated in order.
    pub fn evaluate_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        let d = x.cols();
        let chunks: Vec<Result<Vec<f64>>> = x
            .data()
            .par_chunks(EVAL_CHUNK * d.max(1))
            .map(|chunk| {
                let t = Tensor::from_vec(chunk.len() / d, d, chunk.to_vec());
                let out = self.params.forward_batch(&self.standardize_rows(&t))?;
                Ok(out
                    .data()
                    .iter()
                    .map(|&v| self.standardizer.inverse_output(v))
                    .collect())
            })
            .collect();
        let mut values = Vec::with_capacity(x.rows());
        for c in chunks {
            values.extend(c?);
        }
        Ok(values)
    }

    pub fn evaluate_points(&self, points: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.evaluate_batch(&Tensor::from_rows(points, self.dim()))
    }

    /// Values `G(x_i)` and input gradients `∇G(x_i)` for every row.
    pub fn value_and_grad_batch(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if x.cols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.cols(),
            });
        }
        let s = &self.standardizer;
        let inv_std: Vec<f64> = s.input_std.iter().map(|v| 1.0 / v).collect();
        let shift: Vec<f64> = s
            .input_mean
            .iter()
            .zip(&s.input_std)
            .map(|(m, sd)| -m / sd)
            .collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let u = tape.affine_cols(xv, &inv_std, &shift);
        let vars = self.params.register(&mut tape, false);
        let raw = self.params.forward_tape(&mut tape, &vars, u);
        let g = tape.affine_cols(raw, &[s.output_std], &[s.output_mean]);
        let total = tape.sum(g);
        let grads = tape.backward(total)?;
        let values = tape.value(g).data().to_vec();
        let grad = grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        Ok((values, grad))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported surrogate checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let params = MlpParams::from_layers(ck.model.params.layers().to_vec())?;
        Ok(Self {
            params,
            ..ck.model
        })
    }
}

fn standardized_loss(params: &MlpParams, x: &Tensor, y: &[f64]) -> Result<f64> {
    let pred = params.forward_batch(x)?;
    Ok(pred
        .data()
        .iter()
        .zip(y)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / y.len() as f64)
}

/// Fits an MLP surrogate to `data` with Adam on standardized inputs and outputs.
pub fn train_surrogate(data: &Dataset, config: &TrainConfig) -> Result<SurrogateModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(i) = data.outputs().iter().position(|y| !y.is_finite()) {
        return Err(Error::NonFinite(format!("training target {i}")));
    }
    if data.inputs().iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training input".into()));
    }

    let standardizer = Standardizer::fit(data)?;
    let n = data.len();
    let d = data.dim();
    let xs: Vec<Vec<f64>> = data
        .inputs()
        .iter()
        .map(|x| standardizer.transform_input(x))
        .collect();
    let ys: Vec<f64> = data
        .outputs()
        .iter()
        .map(|&y| standardizer.transform_output(y))
        .collect();
    let x_all = Tensor::from_rows(&xs, d);

    let mut rng = seeded(config.seed);
    let initial = MlpParams::init(d, &config.hidden, 1, &mut rng);
    let initial_loss = standardized_loss(&initial, &x_all, &ys)?;
    let mut params = initial.clone();
    let mut state = AdamState::new();
    let adam = config.adam();
    let batch = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grads = Vec::new();

    for _ in 0..config.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        for idx in order.chunks(batch) {
            let (xb, yb) = if batch == n {
                (x_all.clone(), ys.clone())
            } else {
                let rows: Vec<&Vec<f64>> = idx.iter().map(|&i| &xs[i]).collect();
                (
                    Tensor::from_rows(&rows, d),
                    idx.iter().map(|&i| ys[i]).collect(),
                )
            };
            let m = yb.len();
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let xv = tape.constant(xb);
            let target = tape.constant(Tensor::from_vec(m, 1, yb));
            let pred = params.forward_tape(&mut tape, &vars, xv);
            let resid = tape.sub(pred, target);
            let sq = tape.square(resid);
            let loss = tape.mean(sq);
            let g = tape.backward(loss)?;
            grads.clear();
            collect_grads(&g, &params, &vars, &mut grads);
            adam_step(&mut params.buffers_mut(), &grads, &mut state, &adam)?;
        }
    }

    let mut final_loss = standardized_loss(&params, &x_all, &ys)?;
    if !final_loss.is_finite() {
        return Err(Error::NumericalFailure("surrogate training diverged".into()));
    }
    if final_loss > initial_loss {
        log::warn!("surrogate training did not improve on initialization; keeping initial weights");
        params = initial;
        final_loss = initial_loss;
    }
    Ok(SurrogateModel {
        params,
        standardizer,
        meta: TrainingMeta {
            initial_loss,
            final_loss,
            epochs: config.epochs,
            seed: config.seed,
        },
    })
}
