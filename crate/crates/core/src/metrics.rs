//! Evaluation metrics, the inducing-point ablation and exemplar lookup.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classification::predict_proba;
use crate::datasets::{Dataset, TaskKind};
use crate::error::{IgnError, Result};
use crate::kernels::{kernel_matrix, KernelKind};
use crate::model::{IgnParameters, ModelConfig};
use crate::regression::{predict, CovarianceMode};
use crate::trainer::{train, TrainConfig};

pub fn rmse(pred: &Array1<f64>, truth: &Array1<f64>) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(IgnError::Dimension {
            op: "rmse",
            left: (pred.len(), 1),
            right: (truth.len(), 1),
        });
    }
    let sse: f64 = pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(IgnError::Dimension {
            op: "accuracy",
            left: (pred.len(), 1),
            right: (truth.len(), 1),
        });
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Noise-free predictive variance at each row of `x`.
pub fn epistemic_variance(params: &IgnParameters, x: &Array2<f64>) -> Result<Array1<f64>> {
    Ok(predict(params, x, CovarianceMode::Diag, false)?.variance())
}

/// `params` with one more inducing point appended (its pseudo-label follows
/// from the head).
pub fn with_extra_inducing(params: &IgnParameters, z: &[f64]) -> Result<IgnParameters> {
    let d = params.feature_dim();
    if z.len() != d {
        return Err(IgnError::Dimension {
            op: "with_extra_inducing",
            left: (1, z.len()),
            right: (1, d),
        });
    }
    let mut out = params.clone();
    let row = Array2::from_shape_vec((1, d), z.to_vec()).unwrap();
    out.inducing.z = concatenate![Axis(0), params.inducing.z, row];
    Ok(out)
}

/// Per-point `(mean, noise-free variance)` pairs.
pub fn mean_variance_scatter(params: &IgnParameters, x: &Array2<f64>) -> Result<Vec<(f64, f64)>> {
    let pred = predict(params, x, CovarianceMode::Diag, false)?;
    Ok(pred.mean.iter().copied().zip(pred.variance()).collect())
}

pub fn write_scatter(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mean", "variance"])?;
    for (m, v) in points {
        w.write_record([m.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// A training row near an inducing point, with its kernel value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub index: usize,
    pub kernel: f64,
}

/// For every inducing point, the `k` training rows closest in feature space.
/// RBF ranks by kernel value; the dot product ranks by Euclidean distance.
/// Ties go to the lower row index.
pub fn nearest_exemplars(params: &IgnParameters, x_train: &Array2<f64>, k: usize) -> Result<Vec<Vec<Exemplar>>> {
    let n = x_train.nrows();
    if k == 0 || k > n {
        return Err(IgnError::contract(format!("k = {k} must lie in 1..={n}")));
    }
    let feats = params.embed(x_train)?;
    let z = &params.inducing.z;
    let kz = kernel_matrix(&params.kernel, z, &feats)?;
    let mut out = Vec::with_capacity(z.nrows());
    for j in 0..z.nrows() {
        let row = kz.row(j);
        let mut order: Vec<usize> = (0..n).collect();
        match params.kernel.kind {
            KernelKind::Rbf => order.sort_by(|&a, &b| row[b].total_cmp(&row[a])),
            KernelKind::DotProduct => {
                let dist: Vec<f64> = feats
                    .rows()
                    .into_iter()
                    .map(|f| f.iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum())
                    .collect();
                order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
            }
        }
        out.push(
            order[..k]
                .iter()
                .map(|&i| Exemplar { index: i, kernel: row[i] })
                .collect(),
        );
    }
    Ok(out)
}

pub const DEFAULT_M_GRID: [usize; 7] = [4, 8, 16, 32, 64, 128, 256];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    pub mean_variance: Option<f64>,
    pub metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub m: usize,
    /// Mean over successful repeats of the test-set mean variance.
    pub mean_variance: Option<f64>,
    /// Population std of that quantity across repeats.
    pub std_variance: Option<f64>,
    pub metric: Option<f64>,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub task: TaskKind,
    /// `rmse` (regression, normalized targets) or `accuracy`.
    pub metric_name: String,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Settings shared by every ablation cell.
#[derive(Debug, Clone)]
pub struct AblationSpec {
    pub task: TaskKind,
    pub m_grid: Vec<usize>,
    pub repeats: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Worker threads for independent cells; 1 runs inline.
    pub jobs: usize,
}

/// Retrains a fresh model per `(m, repeat)` and records the mean
/// noise-free test variance. Repeat `r` uses seed `train.seed + r` for both
/// initialization and shuffling. Failed cells are recorded, not fatal.
pub fn ablate(spec: &AblationSpec, train_set: &Dataset, test_set: &Dataset) -> Result<AblationResult> {
    if spec.m_grid.is_empty() || spec.m_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(IgnError::contract("m_grid must be non-empty and strictly ascending"));
    }
    if spec.repeats == 0 || spec.m_grid[0] == 0 {
        return Err(IgnError::contract("repeats and m must be positive"));
    }
    let seeds: Vec<u64> = (0..spec.repeats as u64).map(|r| spec.train.seed.wrapping_add(r)).collect();
    let jobs: Vec<(usize, u64)> = spec
        .m_grid
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let run = |&(m, seed): &(usize, u64)| run_cell(spec, m, seed, train_set, test_set);
    let cells: Vec<AblationCell> = if spec.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(spec.jobs)
            .build()
            .map_err(|e| IgnError::contract(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };

    let rows = spec
        .m_grid
        .iter()
        .zip(cells.chunks(spec.repeats))
        .map(|(&m, chunk)| {
            let vars: Vec<f64> = chunk.iter().filter_map(|c| c.mean_variance).collect();
            let metrics: Vec<f64> = chunk.iter().filter_map(|c| c.metric).collect();
            let (mean, std) = mean_std(&vars);
            AblationRow {
                m,
                mean_variance: mean,
                std_variance: std,
                metric: mean_std(&metrics).0,
                cells: chunk.to_vec(),
            }
        })
        .collect();
    Ok(AblationResult {
        task: spec.task,
        metric_name: match spec.task {
            TaskKind::Regression => "rmse".into(),
            TaskKind::Classification => "accuracy".into(),
        },
        repeats: spec.repeats,
        seeds,
        rows,
    })
}

fn mean_std(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

fn run_cell(spec: &AblationSpec, m: usize, seed: u64, train_set: &Dataset, test_set: &Dataset) -> AblationCell {
    let attempt = || -> Result<(f64, f64)> {
        let mut model = spec.model.clone();
        model.num_inducing = m;
        let cfg = TrainConfig {
            seed,
            ..spec.train.clone()
        };
        let params = IgnParameters::init(&model, seed)?;
        let (params, _) = train(spec.task, params, train_set, &cfg)?;
        let var = epistemic_variance(&params, &test_set.x)?;
        let metric = match spec.task {
            TaskKind::Regression => {
                let pred = predict(&params, &test_set.x, CovarianceMode::Diag, false)?;
                rmse(&pred.mean, &test_set.y)?
            }
            TaskKind::Classification => {
                let p = predict_proba(&params, &test_set.x)?;
                let labels: Vec<usize> = p.iter().map(|&v| usize::from(v >= 0.5)).collect();
                let truth: Vec<usize> = test_set.binary_targets()?.iter().map(|&v| usize::from(v > 0.0)).collect();
                accuracy(&labels, &truth)?
            }
        };
        Ok((var.mean().unwrap_or(0.0), metric))
    };
    match attempt() {
        Ok((v, metric)) => AblationCell {
            seed,
            mean_variance: Some(v),
            metric: Some(metric),
            error: None,
        },
        Err(e) => AblationCell {
            seed,
            mean_variance: None,
            metric: None,
            error: Some(e.to_string()),
        },
    }
}

impl AblationResult {
    /// Aligned text table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("failed".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:>6}  {:>12}  {:>12}  {:>12}", "m", "mean_var", "std_var", self.metric_name);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>6}  {:>12}  {:>12}  {:>12}",
                r.m,
                fmt(r.mean_variance),
                fmt(r.std_variance),
                fmt(r.metric)
            );
        }
        s
    }

    /// Delimited plot data with header `m,mean_var,std_var`.
    pub fn write_plot_data(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["m", "mean_var", "std_var"])?;
        for r in &self.rows {
            let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
            w.write_record([r.m.to_string(), f(r.mean_variance), f(r.std_variance)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn mean_variances(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.mean_variance).collect()
    }
}

/// Whether `values` is non-increasing, allowing at most `max_violations`
/// adjacent increases, each at most `rel_tol` relative to the earlier value.
pub fn non_increasing_within(values: &[f64], rel_tol: f64, max_violations: usize) -> bool {
    let mut violations = 0;
    for w in values.windows(2) {
        if w[1] > w[0] {
            if w[1] - w[0] > rel_tol * w[0].abs() {
                return false;
            }
            violations += 1;
        }
    }
    violations <= max_violations
}
