//! Minibatch training with validation-based early stopping, and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{mse, mse_loss, r_squared};
use super::optim::{clip_grad_norm, AdamParams, Optimizer, OptimizerKind};
use super::TrainError;
use crate::data::{stack, DatasetSplit, NormStats, WindowedSample};
use crate::model::{Model, ModelKind};
use crate::seed;
use crate::tensor::{Graph, Tensor};

/// Rows per inference batch during validation and evaluation.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.eps,
            grad_clip: 1.0,
            patience: 20,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs == 0 {
            out.push("train.epochs: must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            out.push("train.batch_size: must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("train.learning_rate: {} must be positive", self.learning_rate));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("train.{key}: {b} must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            out.push(format!("train.epsilon: {} must be positive", self.epsilon));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            out.push(format!("train.grad_clip: {} must be 0 (off) or positive", self.grad_clip));
        }
        out
    }

    fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: usize,
}

impl TrainLog {
    /// `epoch,train_loss,val_loss,seconds` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,seconds\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.train_loss, r.val_loss, r.seconds));
        }
        s
    }
}

fn check_compatible(model: &Model, split: &DatasetSplit) -> Result<(), TrainError> {
    let s = model.spec();
    let want = (split.window, split.horizon, split.n_inputs(), split.n_targets());
    let have = (s.window, s.horizon, s.input_features, s.output_features);
    if want != have {
        return Err(TrainError::Incompatible(format!(
            "model expects (W, H, F, v) = {have:?}, dataset has {want:?}"
        )));
    }
    Ok(())
}

/// Loss of one teacher-forced minibatch, with gradients of every parameter
/// in store order.
pub fn batch_gradients(model: &Model, x: Tensor, teacher: Tensor, y: Tensor) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let x = g.constant(x);
    let t = model.kind().has_decoder_input().then(|| g.constant(teacher));
    let y = g.constant(y);
    let pred = model.forward_graph(&mut g, &p, x, t)?;
    let loss = mse_loss(&mut g, pred, y)?;
    let value = g.item(loss);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = p
        .vars()
        .iter()
        .map(|&v| g.grad(v).expect("parameters always receive a gradient").to_vec())
        .collect();
    Ok((value, grads))
}

/// Forecasts for `samples` in normalized units, `[N·H·v]` row-major.
/// Decoder-input kinds decode autoregressively; no future target enters.
pub fn predict_normalized(model: &Model, samples: &[WindowedSample]) -> Result<Vec<f64>, TrainError> {
    let s = model.spec();
    let mut out = Vec::with_capacity(samples.len() * s.horizon * s.output_features);
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _, _) = stack(samples, chunk, s.window, s.input_features, s.horizon, s.output_features);
        out.extend_from_slice(model.forward(&x, None)?.data());
    }
    Ok(out)
}

fn targets(samples: &[WindowedSample]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.y.iter().copied()).collect()
}

/// Normalized-unit MSE of inference-mode forecasts.
pub fn validation_loss(model: &Model, samples: &[WindowedSample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    Ok(mse(&predict_normalized(model, samples)?, &targets(samples)))
}

/// Trains `model` in place and returns the log. The returned model holds the
/// parameters of the best validation epoch.
pub fn train(model: &mut Model, split: &DatasetSplit, cfg: &TrainConfig, root_seed: u64) -> Result<TrainLog, TrainError> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(TrainError::Config(problems.join("; ")));
    }
    check_compatible(model, split)?;
    if split.train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    let mut rng = seed::rng(root_seed, "train-order");
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.adam(), model.params());
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    if split.validation.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let mut best_val = f64::INFINITY;
    let mut best_params = model.params().tensors().to_vec();
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: best_val,
        stopped_early: false,
        steps: 0,
    };
    let mut since_best = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, t, y) = split.batch(&split.train, chunk);
            let (loss, mut grads) = batch_gradients(model, x, t, y)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            opt.step(model.params_mut(), &grads)?;
            total += loss * chunk.len() as f64;
            log.steps += 1;
        }
        let train_loss = total / split.train.len() as f64;
        let val_loss = validation_loss(model, &split.validation)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteValidation { epoch });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params.clone_from_slice(model.params().tensors());
            log.best_epoch = epoch;
            log.best_val_loss = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    model.params_mut().tensors_mut().clone_from_slice(&best_params);
    Ok(log)
}

/// Metrics of one model on one partition. MSE values are in normalized
/// units; R² is computed after mapping forecasts back to physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub kind: ModelKind,
    pub window: usize,
    pub horizon: usize,
    pub parameters: usize,
    pub samples: usize,
    pub mse: f64,
    pub mse_per_target: Vec<f64>,
    pub targets: Vec<String>,
    /// Per-target R²; `None` when that target has zero variance.
    pub r2_per_target: Vec<Option<f64>>,
    /// Mean of the defined per-target R² values.
    pub r2_pooled: Option<f64>,
    /// Wall-clock time of the evaluation; kept out of serialized reports so
    /// they stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

pub fn evaluate(model: &Model, samples: &[WindowedSample], stats: &NormStats, split: &str, target_names: &[String]) -> Result<EvalReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let started = Instant::now();
    let s = model.spec();
    let v = s.output_features;
    let mut pred = predict_normalized(model, samples)?;
    let mut truth = targets(samples);
    let mse_all = mse(&pred, &truth);
    let column = |x: &[f64], j: usize| x.iter().skip(j).step_by(v).copied().collect::<Vec<_>>();
    let mse_per_target = (0..v).map(|j| mse(&column(&pred, j), &column(&truth, j))).collect();
    stats.denormalize_targets(&mut pred);
    stats.denormalize_targets(&mut truth);
    let r2: Vec<Option<f64>> = (0..v)
        .map(|j| {
            let (p, t) = (column(&pred, j), column(&truth, j));
            if t.len() < 2 {
                None
            } else {
                r_squared(&p, &t).get()
            }
        })
        .collect();
    let defined: Vec<f64> = r2.iter().flatten().copied().collect();
    let r2_pooled = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(EvalReport {
        split: split.to_string(),
        kind: s.kind,
        window: s.window,
        horizon: s.horizon,
        parameters: model.count_parameters(),
        samples: samples.len(),
        mse: mse_all,
        mse_per_target,
        targets: target_names.to_vec(),
        r2_per_target: r2,
        r2_pooled,
        seconds: started.elapsed().as_secs_f64(),
    })
}
