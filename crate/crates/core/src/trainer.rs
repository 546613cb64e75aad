//! Supervised training of metanetworks on curvature-estimation datasets:
//! Adam, the epoch loop with validation selection, evaluation, and the
//! `.gmc` checkpoint file.

use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metanet::{build, MetaNetModel, ModelConfig};
use crate::numerics::{Tape, Tensor};
use crate::taskgen::{derive_seed, standard_estimate, write_atomic, NormStats, TaskExample};

pub const GMC_MAGIC: [u8; 4] = *b"GMC1";
pub const GMC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Contract(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::dims(
            "adam step",
            &[params.len()],
            &[grads.len(), state.m.len(), state.v.len()],
        ));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powf(state.t as f64);
    let c2 = 1.0 - cfg.beta2.powf(state.t as f64);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// A predictor of normalized Fisher-diagonal targets.
pub trait Estimator: Sync {
    fn predict(&self, example: &TaskExample, norm: &NormStats) -> Result<Vec<f64>>;
}

/// The Fisher diagonal of the example's own input gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct StandardEstimator;

impl Estimator for StandardEstimator {
    fn predict(&self, example: &TaskExample, norm: &NormStats) -> Result<Vec<f64>> {
        Ok(norm.normalize_target(standard_estimate(&example.input)?.data()))
    }
}

impl Estimator for MetaNetModel {
    fn predict(&self, example: &TaskExample, norm: &NormStats) -> Result<Vec<f64>> {
        let x = norm.normalize_input(&example.input)?;
        Ok(self.forward_tensor(&x.to_tensor())?.into_data())
    }
}

fn squared_error(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dims("prediction", &[target.len()], &[pred.len()]));
    }
    Ok(pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

/// Per-example mean squared errors on normalized targets.
pub fn per_example_errors(est: &dyn Estimator, split: &[TaskExample], norm: &NormStats) -> Result<Vec<f64>> {
    split
        .par_iter()
        .map(|e| squared_error(&est.predict(e, norm)?, &norm.normalize_target(e.target.data())))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub per_example: Vec<f64>,
    pub baseline_mse: f64,
    pub baseline_per_example: Vec<f64>,
}

/// MSE of `est` next to the standard estimator on the same split.
pub fn evaluate(est: &dyn Estimator, split: &[TaskExample], norm: &NormStats) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty split".into()));
    }
    let per_example = per_example_errors(est, split, norm)?;
    let baseline_per_example = per_example_errors(&StandardEstimator, split, norm)?;
    Ok(EvalReport {
        mse: mean(&per_example),
        per_example,
        baseline_mse: mean(&baseline_per_example),
        baseline_per_example,
    })
}

/// A split with normalized model inputs and targets precomputed.
pub struct PreparedSplit {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Vec<f64>>,
}

impl PreparedSplit {
    pub fn new(split: &[TaskExample], norm: &NormStats) -> Result<Self> {
        let inputs = split
            .iter()
            .map(|e| Ok(norm.normalize_input(&e.input)?.to_tensor()))
            .collect::<Result<Vec<_>>>()?;
        let targets = split.iter().map(|e| norm.normalize_target(e.target.data())).collect();
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn mse(&self, model: &MetaNetModel) -> Result<f64> {
        let errs = (0..self.len())
            .into_par_iter()
            .map(|i| squared_error(model.forward_tensor(&self.inputs[i])?.data(), &self.targets[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&errs))
    }
}

/// Per-example loss `mean((y − t)²)` and its gradient, flattened in block order.
pub fn loss_and_grad(model: &MetaNetModel, x: &Tensor, target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let y = model.record(&mut tape, &p, xv)?;
    let pred = tape.value(y);
    if pred.len() != target.len() {
        return Err(Error::dims("training target", &[pred.len()], &[target.len()]));
    }
    let n = target.len() as f64;
    let loss = squared_error(pred.data(), target)?;
    let seed: Vec<f64> = pred.data().iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect();
    let seed = Tensor::new(pred.shape().to_vec(), seed)?;
    let mut grads = tape.backward(y, seed)?;
    let mut flat = Vec::with_capacity(model.num_params());
    for &v in &p {
        flat.extend_from_slice(grads.take(v).data());
    }
    Ok((loss, flat))
}

/// Mean loss and gradient over `indices`; per-example results are reduced in index order.
pub fn batch_loss_and_grad(model: &MetaNetModel, data: &PreparedSplit, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
    let parts = indices
        .par_iter()
        .map(|&i| loss_and_grad(model, &data.inputs[i], &data.targets[i]))
        .collect::<Result<Vec<_>>>()?;
    let k = parts.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|v| *v /= k);
    Ok((loss / k, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub num_params: usize,
    /// Mean training loss of each epoch, taken over its mini-batches.
    pub train_mse: Vec<f64>,
    /// Validation MSE after each epoch.
    pub val_mse: Vec<f64>,
    pub initial_val_mse: f64,
    /// Epoch of the selected parameters; 0 is the initialization.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub initial_test_mse: Option<f64>,
    pub test_mse: Option<f64>,
    pub baseline_test_mse: Option<f64>,
    pub wall_secs: f64,
}

pub struct Splits<'a> {
    pub train: &'a [TaskExample],
    pub val: &'a [TaskExample],
    pub test: &'a [TaskExample],
}

/// Trains `model` with Adam and returns the parameters with the best
/// validation MSE along with the run report.
pub fn train(
    mut model: MetaNetModel,
    splits: &Splits<'_>,
    norm: &NormStats,
    cfg: &TrainConfig,
) -> Result<(MetaNetModel, RunReport)> {
    cfg.validate()?;
    if !model.variant().predicts_parameters() {
        return Err(Error::Contract(
            "only parameter-shaped variants can be trained on curvature targets".into(),
        ));
    }
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::Contract(
            "training needs nonempty train and validation splits".into(),
        ));
    }
    let start = Instant::now();
    let train_data = PreparedSplit::new(splits.train, norm)?;
    let val_data = PreparedSplit::new(splits.val, norm)?;
    let test_data = if splits.test.is_empty() {
        None
    } else {
        Some(PreparedSplit::new(splits.test, norm)?)
    };
    let initial_test_mse = test_data.as_ref().map(|t| t.mse(&model)).transpose()?;
    let initial_val_mse = val_data.mse(&model)?;
    let mut best = (0usize, initial_val_mse, model.params.clone());
    let mut adam = AdamState::new(model.num_params());
    let mut flat = model.params.flatten();
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grad) = batch_loss_and_grad(&model, &train_data, chunk)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            adam_step(&mut flat, &grad, &mut adam, cfg)?;
            model.params.set_flat(&flat)?;
            total += loss;
            batches += 1;
        }
        let val = val_data.mse(&model)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batches });
        }
        train_curve.push(total / batches as f64);
        val_curve.push(val);
        if val < best.1 {
            best = (epoch, val, model.params.clone());
        }
        info!(
            "epoch {epoch}: train {:.6} val {val:.6} (best {:.6} @ {})",
            total / batches as f64,
            best.1,
            best.0
        );
    }
    model.params = best.2;
    let test_mse = test_data.as_ref().map(|t| t.mse(&model)).transpose()?;
    let baseline_test_mse = if splits.test.is_empty() {
        None
    } else {
        Some(mean(&per_example_errors(&StandardEstimator, splits.test, norm)?))
    };
    let report = RunReport {
        model: model.config.clone(),
        train: cfg.clone(),
        num_params: model.num_params(),
        train_mse: train_curve,
        val_mse: val_curve,
        initial_val_mse,
        best_epoch: best.0,
        best_val_mse: best.1,
        initial_test_mse,
        test_mse,
        baseline_test_mse,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Curves as CSV: a header and one row per epoch.
pub fn report_csv(report: &RunReport) -> String {
    let mut s = String::from("epoch,train_mse,val_mse\n");
    for (i, (t, v)) in report.train_mse.iter().zip(&report.val_mse).enumerate() {
        s.push_str(&format!("{},{t:e},{v:e}\n", i + 1));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    dims: Vec<usize>,
    blocks: Vec<BlockInfo>,
    adam: bool,
    adam_t: u64,
    norm: Option<NormStats>,
    split: Option<[usize; 3]>,
}

/// A trained model with what is needed to evaluate or resume it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: MetaNetModel,
    pub norm: Option<NormStats>,
    /// Train/val/test sizes the model was fitted with.
    pub split: Option<[usize; 3]>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.model.params;
        let manifest = Manifest {
            version: GMC_VERSION,
            config: self.model.config.clone(),
            dims: self.model.dims().to_vec(),
            blocks: p
                .names()
                .iter()
                .zip(p.tensors())
                .map(|(n, t)| BlockInfo {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adam: self.adam.is_some(),
            adam_t: self.adam.as_ref().map_or(0, |a| a.t),
            norm: self.norm.clone(),
            split: self.split,
        };
        let header = serde_json::to_vec(&manifest).map_err(|e| Error::Header(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&GMC_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut push = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        push(&p.flatten());
        if let Some(a) = &self.adam {
            push(&a.m);
            push(&a.v);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != GMC_MAGIC {
            return Err(Error::BadMagic {
                expected: GMC_MAGIC,
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        if bytes.len() < 8 {
            return Err(Error::Truncated {
                what: "header length",
                needed: 8,
                available: bytes.len(),
            });
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 8 + hlen {
            return Err(Error::Truncated {
                what: "manifest",
                needed: 8 + hlen,
                available: bytes.len(),
            });
        }
        let m: Manifest = serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| Error::Header(e.to_string()))?;
        if m.version != GMC_VERSION {
            return Err(Error::Header(format!("unsupported checkpoint version {}", m.version)));
        }
        let mut model = build(&m.config, &m.dims, 0)?;
        let layout: Vec<BlockInfo> = model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(n, t)| BlockInfo {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        if layout != m.blocks {
            return Err(Error::Header("block layout does not match the model config".into()));
        }
        let n = model.num_params();
        let declared = 8 * n * if m.adam { 3 } else { 1 };
        let payload = &bytes[8 + hlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(Error::Truncated {
                what: "tensor payload",
                needed: payload.len().next_multiple_of(8),
                available: payload.len(),
            });
        }
        if payload.len() != declared {
            return Err(Error::Integrity {
                declared,
                actual: payload.len(),
            });
        }
        let vals: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model.params.set_flat(&vals[..n])?;
        let adam = m.adam.then(|| AdamState {
            t: m.adam_t,
            m: vals[n..2 * n].to_vec(),
            v: vals[2 * n..].to_vec(),
        });
        Ok(Self {
            model,
            norm: m.norm,
            split: m.split,
            adam,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
