//! Synthetic benchmarks, delimited-file ingestion, splitting and
//! normalization.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{IgnError, Result};
use crate::rng::{sub_rng, Stream};

/// Environment variable naming the generated-dataset cache directory.
pub const CACHE_ENV: &str = "IGN_CACHE_DIR";

/// Observation noise of the synthetic generators, as a fraction of the
/// standard deviation of the clean targets.
pub const DEFAULT_NOISE_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl std::str::FromStr for TaskKind {
    type Err = IgnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "regression" | "reg" => Ok(TaskKind::Regression),
            "classification" | "class" | "binary-classification" => Ok(TaskKind::Classification),
            other => Err(IgnError::Schema(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub task: TaskKind,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, task: TaskKind) -> Result<Self> {
        let names = (0..x.ncols()).map(|i| format!("x{i}")).collect();
        Self::with_names(x, y, names, "y".into(), task)
    }

    pub fn with_names(
        x: Array2<f64>,
        y: Array1<f64>,
        feature_names: Vec<String>,
        target_name: String,
        task: TaskKind,
    ) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(IgnError::Dimension {
                op: "dataset",
                left: x.dim(),
                right: (y.len(), 1),
            });
        }
        if feature_names.len() != x.ncols() {
            return Err(IgnError::Schema(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                x.ncols()
            )));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(IgnError::Schema("dataset contains NaN or Inf".into()));
        }
        Ok(Dataset {
            x,
            y,
            feature_names,
            target_name,
            task,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            task: self.task,
        }
    }

    /// Integer class labels; errors on non-integral or negative targets.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.y
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(IgnError::Schema(format!("class label {v} is not a non-negative integer")))
                }
            })
            .collect()
    }

    /// Binary targets as ±1: `{0, 1}` maps to `{−1, +1}` and `±1` passes through.
    pub fn binary_targets(&self) -> Result<Array1<f64>> {
        let zero_one = self.y.iter().all(|&v| v == 0.0 || v == 1.0);
        let pm = self.y.iter().all(|&v| v == -1.0 || v == 1.0);
        if zero_one {
            Ok(self.y.mapv(|v| 2.0 * v - 1.0))
        } else if pm {
            Ok(self.y.clone())
        } else {
            Err(IgnError::Schema("binary labels must be {0,1} or {-1,+1}".into()))
        }
    }
}

pub fn levy(x: &[f64]) -> f64 {
    let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
    let d = w.len();
    let mut f = (PI * w[0]).sin().powi(2);
    for wi in &w[..d - 1] {
        f += (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2));
    }
    let wd = w[d - 1];
    f + (wd - 1.0).powi(2) * (1.0 + (2.0 * PI * wd).sin().powi(2))
}

pub fn griewank(x: &[f64]) -> f64 {
    let sum: f64 = x.iter().map(|v| v * v).sum::<f64>() / 4000.0;
    let prod: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (v / ((i + 1) as f64).sqrt()).cos())
        .product();
    sum - prod + 1.0
}

/// Input ranges of the borehole function, in column order
/// `rw, r, Tu, Hu, Tl, Hl, L, Kw`.
pub const BOREHOLE_RANGES: [(f64, f64); 8] = [
    (0.05, 0.15),
    (100.0, 50_000.0),
    (63_070.0, 115_600.0),
    (990.0, 1110.0),
    (63.1, 116.0),
    (700.0, 820.0),
    (1120.0, 1680.0),
    (9855.0, 12_045.0),
];

/// Water flow through a borehole.
pub fn borehole(x: &[f64]) -> f64 {
    let [rw, r, tu, hu, tl, hl, l, kw] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6], x[7]];
    let lr = (r / rw).ln();
    2.0 * PI * tu * (hu - hl) / (lr * (1.0 + 2.0 * l * tu / (lr * rw * rw * kw) + tu / tl))
}

fn add_noise(clean: Array1<f64>, noise_std: f64, seed: u64) -> Array1<f64> {
    if noise_std == 0.0 || clean.len() < 2 {
        return clean;
    }
    let scale = clean.std(0.0);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let normal = Normal::new(0.0, noise_std * scale).unwrap();
    let mut rng = sub_rng(seed, Stream::Noise, 0);
    clean.mapv(|v| v + normal.sample(&mut rng))
}

fn uniform_inputs(n: usize, ranges: &[(f64, f64)], seed: u64) -> Array2<f64> {
    let mut rng = sub_rng(seed, Stream::Data, 0);
    let mut x = Array2::zeros((n, ranges.len()));
    for mut row in x.rows_mut() {
        for (v, &(lo, hi)) in row.iter_mut().zip(ranges) {
            *v = rng.random_range(lo..hi);
        }
    }
    x
}

fn generate(n: usize, ranges: &[(f64, f64)], noise_std: f64, seed: u64, f: fn(&[f64]) -> f64) -> Result<Dataset> {
    if n == 0 || ranges.is_empty() {
        return Err(IgnError::contract("generators need n >= 1 and dim >= 1"));
    }
    let x = uniform_inputs(n, ranges, seed);
    let clean: Array1<f64> = x.rows().into_iter().map(|r| f(&r.to_vec())).collect();
    Dataset::new(x, add_noise(clean, noise_std, seed), TaskKind::Regression)
}

pub fn gen_levy(n: usize, dim: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    generate(n, &vec![(-10.0, 10.0); dim], noise_std, seed, levy)
}

pub fn gen_griewank(n: usize, dim: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    generate(n, &vec![(-600.0, 600.0); dim], noise_std, seed, griewank)
}

pub fn gen_borehole(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    let mut ds = generate(n, &BOREHOLE_RANGES, noise_std, seed, borehole)?;
    ds.feature_names = ["rw", "r", "Tu", "Hu", "Tl", "Hl", "L", "Kw"].map(String::from).to_vec();
    Ok(ds)
}

/// `y = sin(x)` on `x ∈ [−π, π]`.
pub fn gen_sin_wave(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    generate(n, &[(-PI, PI)], noise_std, seed, |x| x[0].sin())
}

/// Isotropic unit-variance 2-D Gaussian blobs. Class centres sit on a
/// circle with adjacent centres `separation` apart; labels are assigned
/// round-robin so classes are balanced.
pub fn gen_blobs(n: usize, classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || classes < 2 {
        return Err(IgnError::contract("blobs need n >= 1 and at least two classes"));
    }
    let radius = separation / (2.0 * (PI / classes as f64).sin());
    let mut rng = sub_rng(seed, Stream::Data, 0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = Array2::zeros((n, 2));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let c = i % classes;
        let angle = 2.0 * PI * c as f64 / classes as f64;
        x[[i, 0]] = radius * angle.cos() + normal.sample(&mut rng);
        x[[i, 1]] = radius * angle.sin() + normal.sample(&mut rng);
        y[i] = c as f64;
    }
    Dataset::new(x, y, TaskKind::Classification)
}

/// Named generator with its arguments; used for caching and run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Generator {
    Levy { n: usize, dim: usize },
    Griewank { n: usize, dim: usize },
    Borehole { n: usize },
    SinWave { n: usize },
    Blobs { n: usize, classes: usize, separation: f64 },
}

impl Generator {
    pub fn generate(&self, noise_std: f64, seed: u64) -> Result<Dataset> {
        match *self {
            Generator::Levy { n, dim } => gen_levy(n, dim, noise_std, seed),
            Generator::Griewank { n, dim } => gen_griewank(n, dim, noise_std, seed),
            Generator::Borehole { n } => gen_borehole(n, noise_std, seed),
            Generator::SinWave { n } => gen_sin_wave(n, noise_std, seed),
            Generator::Blobs { n, classes, separation } => gen_blobs(n, classes, separation, seed),
        }
    }

    fn cache_key(&self, noise_std: f64, seed: u64) -> String {
        let body = match *self {
            Generator::Levy { n, dim } => format!("levy-n{n}-d{dim}"),
            Generator::Griewank { n, dim } => format!("griewank-n{n}-d{dim}"),
            Generator::Borehole { n } => format!("borehole-n{n}"),
            Generator::SinWave { n } => format!("sin-n{n}"),
            Generator::Blobs { n, classes, separation } => format!("blobs-n{n}-c{classes}-s{separation}"),
        };
        format!("{body}-noise{noise_std}-seed{seed}.csv")
    }

    /// Generates, reading from and writing to the cache directory named by
    /// [`CACHE_ENV`] when it is set.
    pub fn load_or_generate(&self, noise_std: f64, seed: u64) -> Result<Dataset> {
        let Some(dir) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
            return self.generate(noise_std, seed);
        };
        let path = dir.join(self.cache_key(noise_std, seed));
        let task = match self {
            Generator::Blobs { .. } => TaskKind::Classification,
            _ => TaskKind::Regression,
        };
        if path.exists() {
            let target = "y";
            let (mut ds, _) = load_delimited(&path, target, b',')?;
            ds.task = task;
            return Ok(ds);
        }
        let ds = self.generate(noise_std, seed)?;
        std::fs::create_dir_all(&dir)?;
        write_delimited(&ds, &path, b',')?;
        Ok(ds)
    }
}

/// Rows kept and dropped by [`load_delimited`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub rows: usize,
    pub dropped: usize,
}

/// Reads a delimited file with a header row. `target` is a column name or,
/// failing that, a zero-based column index. Rows with missing or
/// non-numeric cells are dropped and counted.
pub fn load_delimited(path: &Path, target: &str, delimiter: u8) -> Result<(Dataset, LoadSummary)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(IgnError::Schema(format!("{} has no header row", path.display())));
    }
    let t = headers
        .iter()
        .position(|h| h == target)
        .or_else(|| target.parse::<usize>().ok().filter(|&i| i < headers.len()))
        .ok_or_else(|| IgnError::Schema(format!("target column '{target}' not found")))?;

    let width = headers.len();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dropped = 0;
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        let parsed: Option<Vec<f64>> = (record.len() == width)
            .then(|| {
                record
                    .iter()
                    .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
                    .collect()
            })
            .flatten();
        match parsed {
            Some(vals) => {
                for (i, v) in vals.into_iter().enumerate() {
                    if i == t {
                        ys.push(v);
                    } else {
                        xs.push(v);
                    }
                }
            }
            None => dropped += 1,
        }
    }
    if ys.is_empty() {
        return Err(IgnError::Schema(format!("{} has no usable rows", path.display())));
    }
    if dropped > 0 {
        warn!("{}: dropped {dropped} malformed row(s)", path.display());
    }
    let n = ys.len();
    let x = Array2::from_shape_vec((n, width - 1), xs).expect("row width checked");
    let mut names = headers.clone();
    let target_name = names.remove(t);
    let ds = Dataset::with_names(x, Array1::from(ys), names, target_name, TaskKind::Regression)?;
    Ok((ds, LoadSummary { rows: n, dropped }))
}

/// Reads an all-numeric delimited file with a header row, optionally
/// dropping one named column. Unlike [`load_delimited`], a malformed row is
/// an error, since every input row must produce an output row.
pub fn load_features(path: &Path, delimiter: u8, drop: Option<&str>) -> Result<(Array2<f64>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    let skip = match drop {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| IgnError::Schema(format!("column '{name}' not found")))?,
        ),
        None => None,
    };
    let mut vals = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| IgnError::Schema(format!("row {}: {e}", i + 1)))?;
        for (j, cell) in record.iter().enumerate() {
            if Some(j) == skip {
                continue;
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| IgnError::Schema(format!("row {}: '{cell}' is not a number", i + 1)))?;
            vals.push(v);
        }
        rows += 1;
    }
    let names: Vec<String> = headers
        .into_iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, h)| h)
        .collect();
    if rows == 0 || names.is_empty() {
        return Err(IgnError::Schema(format!("{} has no data rows", path.display())));
    }
    let x = Array2::from_shape_vec((rows, names.len()), vals).expect("csv enforces equal row lengths");
    Ok((x, names))
}

/// Writes features then target, with a header row. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_delimited(ds: &Dataset, path: &Path, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_path(path)?;
    let mut header = ds.feature_names.clone();
    header.push(ds.target_name.clone());
    w.write_record(&header)?;
    for (row, y) in ds.x.rows().into_iter().zip(ds.y.iter()) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded shuffle split; the training part has `⌈fraction·n⌉` rows, clamped
/// so both parts are non-empty.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds.len(), train_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(IgnError::contract("split needs at least two rows"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(IgnError::contract(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut sub_rng(seed, Stream::Split, 0));
    // The product can land a hair above an integer (0.6 * 10 = 6.000000000000001).
    let raw = train_fraction * n as f64;
    let k = ((raw - 1e-9).ceil() as usize).clamp(1, n - 1);
    let test = idx.split_off(k);
    Ok((idx, test))
}

/// Per-column standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    /// Identity (0, 1) when targets are left alone, as for classification.
    pub y_mean: f64,
    pub y_std: f64,
    /// Columns whose spread was zero; their std is forced to 1.
    pub constant_columns: Vec<usize>,
}

fn mean_std(v: ndarray::ArrayView1<f64>) -> (f64, f64, bool) {
    let mean = v.mean().unwrap_or(0.0);
    let std = v.std(0.0);
    if std > 0.0 && std.is_finite() {
        (mean, std, false)
    } else {
        (mean, 1.0, true)
    }
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Self {
        let mut x_mean = Vec::with_capacity(train.dim());
        let mut x_std = Vec::with_capacity(train.dim());
        let mut constant_columns = Vec::new();
        for (j, col) in train.x.columns().into_iter().enumerate() {
            let (m, s, flat) = mean_std(col);
            x_mean.push(m);
            x_std.push(s);
            if flat {
                warn!("column {j} is constant; std forced to 1");
                constant_columns.push(j);
            }
        }
        let (y_mean, y_std) = match train.task {
            TaskKind::Regression => {
                let (m, s, _) = mean_std(train.y.view());
                (m, s)
            }
            TaskKind::Classification => (0.0, 1.0),
        };
        Normalizer {
            x_mean,
            x_std,
            y_mean,
            y_std,
            constant_columns,
        }
    }

    pub fn transform_x(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.x_mean.len() {
            return Err(IgnError::Dimension {
                op: "normalize",
                left: x.dim(),
                right: (1, self.x_mean.len()),
            });
        }
        let mean = ndarray::ArrayView1::from(&self.x_mean[..]);
        let std = ndarray::ArrayView1::from(&self.x_std[..]);
        Ok((x - &mean) / &std)
    }

    pub fn inverse_x(&self, x: &Array2<f64>) -> Array2<f64> {
        let mean = ndarray::ArrayView1::from(&self.x_mean[..]);
        let std = ndarray::ArrayView1::from(&self.x_std[..]);
        x * &std + &mean
    }

    pub fn transform_y(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| (v - self.y_mean) / self.y_std)
    }

    pub fn inverse_y(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| v * self.y_std + self.y_mean)
    }

    /// Rescales a normalized-space variance to raw target units.
    pub fn inverse_variance(&self, var: &Array1<f64>) -> Array1<f64> {
        var.mapv(|v| v * self.y_std * self.y_std)
    }

    /// Normalizes features, and targets for regression.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let y = match ds.task {
            TaskKind::Regression => self.transform_y(&ds.y),
            TaskKind::Classification => ds.y.clone(),
        };
        Dataset::with_names(
            self.transform_x(&ds.x)?,
            y,
            ds.feature_names.clone(),
            ds.target_name.clone(),
            ds.task,
        )
    }
}
