//! Mini-batch Adam on the (negative) marginal likelihood.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info, warn};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::classification::{laplace_log_marginal, predict_proba, NewtonConfig};
use crate::datasets::{Dataset, TaskKind};
use crate::error::{IgnError, Result};
use crate::linalg::schedule_with_floor;
use crate::metrics::{accuracy, rmse};
use crate::model::{IgnParameters, Trainable};
use crate::persist::{Heads, ModelFile};
use crate::regression::{nll_loss, predict, CovarianceMode};
use crate::rng::{sub_rng, Stream};

/// How the batch loss is scaled before differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScaling {
    /// The batch loss as is.
    PerBatch,
    /// Batch loss times `n / b`, an unbiased estimate of the full-data loss.
    NOverB,
}

impl std::str::FromStr for LossScaling {
    type Err = IgnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-batch" => Ok(LossScaling::PerBatch),
            "n-over-b" => Ok(LossScaling::NOverB),
            other => Err(IgnError::Schema(format!("unknown loss scaling '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_scaling: LossScaling,
    pub trainable: Trainable,
    pub newton: NewtonConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_scaling: LossScaling::PerBatch,
            trainable: Trainable::default(),
            newton: NewtonConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(IgnError::contract("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(IgnError::contract("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(IgnError::contract("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(IgnError::contract("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if self.newton.max_iter == 0 || !(self.newton.tol > 0.0) {
            return Err(IgnError::contract("Newton needs max_iter >= 1 and tol > 0"));
        }
        Ok(())
    }
}

/// Adam moment estimates over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn from_config(c: &TrainConfig) -> Self {
        AdamHyper {
            lr: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if `grads` is not finite.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], h: &AdamHyper) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(IgnError::Dimension {
            op: "adam_step",
            left: (params.len(), 1),
            right: (grads.len(), 1),
        });
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(IgnError::numerical("gradient"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}

/// Loss of one batch (negative log marginal likelihood) and its gradient
/// with respect to every parameter scalar, in flattening order. Frozen
/// groups get zero gradient.
pub fn loss_and_gradient(
    task: TaskKind,
    params: &IgnParameters,
    x: &Array2<f64>,
    y: &Array1<f64>,
    trainable: &Trainable,
    newton: &NewtonConfig,
    jitter_floor: f64,
    scale: f64,
) -> Result<BatchGradient> {
    let mut tape = Tape::with_jitter_schedule(schedule_with_floor(jitter_floor));
    let pv = params.bind(&mut tape, trainable);
    let loss = match task {
        TaskKind::Regression => nll_loss(&mut tape, &pv, x, y)?,
        TaskKind::Classification => {
            let out = laplace_log_marginal(&mut tape, &pv, x, y, newton)?;
            tape.scale_const(-1.0, out.log_marginal)
        }
    };
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(IgnError::numerical("batch loss"));
    }
    let scaled = tape.scale_const(scale, loss);
    let grads = tape.backward(scaled)?;
    let mut flat = Vec::with_capacity(params.num_scalars());
    for v in pv.vars() {
        flat.extend(grads.get(v).iter());
    }
    Ok(BatchGradient {
        loss: value,
        grad: flat,
        jitter_escalations: tape.jitter_escalations(),
    })
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Unscaled batch loss.
    pub loss: f64,
    pub grad: Vec<f64>,
    pub jitter_escalations: usize,
}

/// Where and how often to write checkpoints. `template` supplies the config
/// and normalizer stored alongside the parameters.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    pub every: usize,
    pub template: ModelFile,
}

impl CheckpointPolicy {
    fn write(&self, name: &str, params: &IgnParameters) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)?;
        let mut file = self.template.clone();
        file.heads = Heads::Single { params: params.clone() };
        let path = self.dir.join(name);
        file.save(&path)?;
        Ok(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: TaskKind,
    pub epochs_completed: usize,
    /// Mean per-point loss over the batches of each epoch.
    pub loss_trace: Vec<f64>,
    pub final_metrics: BTreeMap<String, f64>,
    pub jitter_escalations: usize,
    pub recoveries: usize,
    pub final_jitter_floor: f64,
    /// Kept out of the JSON so that reports are reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

const MAX_CONSECUTIVE_FAILURES: usize = 3;
const FIRST_JITTER_FLOOR: f64 = 1e-10;

/// Training targets: raw for regression, ±1 for classification.
pub fn targets(task: TaskKind, ds: &Dataset) -> Result<Array1<f64>> {
    match task {
        TaskKind::Regression => Ok(ds.y.clone()),
        TaskKind::Classification => ds.binary_targets(),
    }
}

pub fn train(
    task: TaskKind,
    params: IgnParameters,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(IgnParameters, TrainReport)> {
    train_with_checkpoints(task, params, dataset, config, None)
}

pub fn train_with_checkpoints(
    task: TaskKind,
    mut params: IgnParameters,
    dataset: &Dataset,
    config: &TrainConfig,
    checkpoints: Option<&CheckpointPolicy>,
) -> Result<(IgnParameters, TrainReport)> {
    config.validate()?;
    params.validate()?;
    if dataset.is_empty() {
        return Err(IgnError::contract("training set is empty"));
    }
    if dataset.dim() != params.input_dim() {
        return Err(IgnError::Schema(format!(
            "model expects {} features, dataset has {}",
            params.input_dim(),
            dataset.dim()
        )));
    }
    let y = targets(task, dataset)?;
    let n = dataset.len();
    let batch = config.batch_size.min(n);
    let hyper = AdamHyper::from_config(config);
    let mask = expand_mask(&params, &config.trainable);
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());

    let start = Instant::now();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut jitter_floor = 0.0f64;
    let mut escalations = 0;
    let mut recoveries = 0;
    let mut consecutive = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut sub_rng(config.seed, Stream::Shuffle, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut epoch_points = 0;
        for idx in order.chunks(batch) {
            let xb = dataset.x.select(Axis(0), idx);
            let yb = y.select(Axis(0), idx);
            let scale = match config.loss_scaling {
                LossScaling::PerBatch => 1.0,
                LossScaling::NOverB => n as f64 / idx.len() as f64,
            };
            let outcome = loss_and_gradient(task, &params, &xb, &yb, &config.trainable, &config.newton, jitter_floor, scale)
                .and_then(|bg| {
                    let mut g = bg.grad.clone();
                    for (gi, &m) in g.iter_mut().zip(&mask) {
                        if !m {
                            *gi = 0.0;
                        }
                    }
                    let mut next = flat.clone();
                    let mut next_adam = adam.clone();
                    adam_step(&mut next_adam, &mut next, &g, &hyper)?;
                    let next_params = params.unflatten(&next)?;
                    if !next.iter().all(|v| v.is_finite()) {
                        return Err(IgnError::numerical("parameters after update"));
                    }
                    Ok((bg, next, next_adam, next_params))
                });
            match outcome {
                Ok((bg, next, next_adam, next_params)) => {
                    escalations += bg.jitter_escalations;
                    epoch_loss += bg.loss;
                    epoch_points += idx.len();
                    flat = next;
                    adam = next_adam;
                    params = next_params;
                    consecutive = 0;
                }
                Err(e) if e.is_numerical() => {
                    recoveries += 1;
                    consecutive += 1;
                    jitter_floor = if jitter_floor == 0.0 { FIRST_JITTER_FLOOR } else { jitter_floor * 10.0 };
                    warn!("epoch {epoch}: skipped batch ({e}); jitter floor now {jitter_floor:e}");
                    if consecutive >= MAX_CONSECUTIVE_FAILURES {
                        let checkpoint = match checkpoints {
                            Some(c) => Some(c.write("last-good.json", &params)?),
                            None => None,
                        };
                        return Err(IgnError::Diverged {
                            epoch,
                            reason: e.to_string(),
                            checkpoint,
                        });
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let mean = if epoch_points > 0 {
            epoch_loss / epoch_points as f64
        } else {
            // Every batch of the epoch failed (only possible with tiny n).
            trace.last().copied().unwrap_or(f64::MAX)
        };
        trace.push(mean);
        debug!("epoch {epoch}: loss {mean:.6}");
        if let Some(c) = checkpoints {
            if c.every > 0 && (epoch + 1) % c.every == 0 {
                c.write(&format!("epoch-{:05}.json", epoch + 1), &params)?;
            }
        }
    }

    let final_metrics = training_metrics(task, &params, dataset, &y)?;
    info!(
        "trained {} epochs, final loss {:.6}, {} recoveries",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN),
        recoveries
    );
    let report = TrainReport {
        task,
        epochs_completed: trace.len(),
        loss_trace: trace,
        final_metrics,
        jitter_escalations: escalations,
        recoveries,
        final_jitter_floor: jitter_floor,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

fn expand_mask(params: &IgnParameters, trainable: &Trainable) -> Vec<bool> {
    params
        .tensors()
        .iter()
        .zip(params.trainable_mask(trainable))
        .flat_map(|(t, m)| std::iter::repeat_n(m, t.len()))
        .collect()
}

fn training_metrics(
    task: TaskKind,
    params: &IgnParameters,
    ds: &Dataset,
    y: &Array1<f64>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    match task {
        TaskKind::Regression => {
            let pred = predict(params, &ds.x, CovarianceMode::Diag, false)?;
            out.insert("train_rmse".into(), rmse(&pred.mean, y)?);
        }
        TaskKind::Classification => {
            let p = predict_proba(params, &ds.x)?;
            let labels: Vec<usize> = p.iter().map(|&v| usize::from(v >= 0.5)).collect();
            let truth: Vec<usize> = y.iter().map(|&v| usize::from(v > 0.0)).collect();
            out.insert("train_accuracy".into(), accuracy(&labels, &truth)?);
        }
    }
    Ok(out)
}
