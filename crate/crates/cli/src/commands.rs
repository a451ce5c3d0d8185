use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use ign::classification::{argmax_lowest, OneVsAll};
use ign::datasets::{load_features, split_indices, Dataset, Normalizer, TaskKind};
use ign::metrics::{
    ablate as run_ablation, accuracy, epistemic_variance, nearest_exemplars, rmse, AblationSpec, Exemplar,
};
use ign::model::IgnParameters;
use ign::persist::{Heads, ModelFile};
use ign::regression::{predict as gp_predict, CovarianceMode};
use ign::trainer::{train_with_checkpoints, CheckpointPolicy, TrainReport};
use ign::{IgnError, Result};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ConfigArgs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Mean noise-free predictive variance (normalized target units).
    pub mean_variance: f64,
    pub n_test: usize,
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    task: TaskKind,
    heads: &'a [TrainReport],
    test: &'a Metrics,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_run_config(c: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), c)?;
    std::fs::write(out.join("config.txt"), c.to_flat())?;
    Ok(())
}

fn normalized_splits(c: &RunConfig) -> Result<(Dataset, Dataset, Normalizer)> {
    let (train, test) = c.splits()?;
    let nz = Normalizer::fit(&train);
    Ok((nz.apply(&train)?, nz.apply(&test)?, nz))
}

/// Number of classes implied by the labels; errors on non-integer labels.
fn class_count(ds: &Dataset) -> Result<usize> {
    if ds.binary_targets().is_ok() {
        return Ok(2);
    }
    let labels = ds.class_labels()?;
    Ok(labels.iter().max().map_or(0, |m| m + 1))
}

fn fresh_params(c: &RunConfig, input_dim: usize, train: &Dataset) -> Result<IgnParameters> {
    let mut p = IgnParameters::init(&c.model_config(input_dim), c.seed)?;
    if c.init_z_from_data {
        p.init_z_from_data(&train.x, c.seed)?;
    }
    Ok(p)
}

pub fn train(c: &RunConfig, out: &Path) -> Result<()> {
    let started = Instant::now();
    write_run_config(c, out)?;
    let (train_set, test_set, nz) = normalized_splits(c)?;
    let input_dim = train_set.dim();
    let model_config = c.model_config(input_dim);
    let train_config = c.train_config();
    let template = ModelFile::new(
        c.task,
        model_config.clone(),
        Heads::OneVsAll { heads: vec![] },
        Some(nz.clone()),
    );
    let policy = |dir: PathBuf| CheckpointPolicy {
        dir,
        every: c.checkpoint_every,
        template: template.clone(),
    };
    let classes = match c.task {
        TaskKind::Regression => 1,
        TaskKind::Classification => class_count(&train_set)?,
    };
    info!(
        "training on {} rows ({} test), {} feature(s), m = {}",
        train_set.len(),
        test_set.len(),
        input_dim,
        c.m
    );

    let (heads, reports) = if classes <= 2 {
        let params = fresh_params(c, input_dim, &train_set)?;
        let ckpt = policy(out.join("checkpoints"));
        let (p, r) = train_with_checkpoints(c.task, params, &train_set, &train_config, Some(&ckpt))?;
        (Heads::Single { params: p }, vec![r])
    } else {
        let labels = train_set.class_labels()?;
        let reports: Mutex<Vec<Option<TrainReport>>> = Mutex::new(vec![None; classes]);
        let ova = OneVsAll::train(&labels, classes, c.jobs, |class, y| {
            let mut ds = train_set.clone();
            ds.y = y.clone();
            let params = fresh_params(c, input_dim, &ds)?;
            let ckpt = policy(out.join("checkpoints").join(format!("class-{class}")));
            let (p, r) = train_with_checkpoints(c.task, params, &ds, &train_config, Some(&ckpt))?;
            reports.lock().unwrap()[class] = Some(r);
            Ok(p)
        })?;
        let reports = reports.into_inner().unwrap().into_iter().map(Option::unwrap).collect();
        (Heads::OneVsAll { heads: ova.heads }, reports)
    };

    let model = ModelFile::new(c.task, model_config, heads, Some(nz));
    model.save(&out.join("model.json"))?;
    let metrics = evaluate(&model, &test_set, false, true)?;
    write_json(
        &out.join("report.json"),
        &RunReport {
            task: c.task,
            heads: &reports,
            test: &metrics,
        },
    )?;
    write_json(&out.join("metrics.json"), &metrics)?;
    let timing: BTreeMap<&str, serde_json::Value> = BTreeMap::from([
        ("total_secs", started.elapsed().as_secs_f64().into()),
        (
            "train_secs_per_head",
            reports.iter().map(|r| r.wall_clock_secs).collect::<Vec<_>>().into(),
        ),
    ]);
    write_json(&out.join("timing.json"), &timing)?;
    println!("{}", serde_json::to_string(&metrics)?);
    info!("run written to {}", out.display());
    Ok(())
}

/// Scores `ds`. When `normalized` is true the dataset is already in model
/// space; otherwise features (and regression targets) are normalized here.
fn evaluate(model: &ModelFile, ds: &Dataset, raw_rmse: bool, normalized: bool) -> Result<Metrics> {
    let x = if normalized {
        ds.x.clone()
    } else {
        model.prepare_inputs(&ds.x)?
    };
    let heads = model.heads.all();
    let mut variance = 0.0;
    for h in &heads {
        variance += epistemic_variance(h, &x)?.mean().unwrap_or(0.0);
    }
    let mut m = Metrics {
        rmse: None,
        raw_rmse: None,
        accuracy: None,
        mean_variance: variance / heads.len() as f64,
        n_test: ds.len(),
    };
    match model.task {
        TaskKind::Regression => {
            let pred = gp_predict(heads[0], &x, CovarianceMode::Diag, false)?;
            let (y_model, y_raw, mean_raw) = match (&model.normalizer, normalized) {
                (Some(nz), true) => (ds.y.clone(), nz.inverse_y(&ds.y), nz.inverse_y(&pred.mean)),
                (Some(nz), false) => (nz.transform_y(&ds.y), ds.y.clone(), nz.inverse_y(&pred.mean)),
                (None, _) => (ds.y.clone(), ds.y.clone(), pred.mean.clone()),
            };
            m.rmse = Some(rmse(&pred.mean, &y_model)?);
            if raw_rmse {
                m.raw_rmse = Some(rmse(&mean_raw, &y_raw)?);
            }
        }
        TaskKind::Classification => {
            let probs = model.class_probabilities(&x)?;
            let (pred, truth): (Vec<usize>, Vec<usize>) = match &model.heads {
                Heads::Single { .. } => (
                    probs.column(0).iter().map(|&p| usize::from(p >= 0.5)).collect(),
                    ds.binary_targets()?.iter().map(|&v| usize::from(v > 0.0)).collect(),
                ),
                Heads::OneVsAll { .. } => (
                    probs.rows().into_iter().map(|r| argmax_lowest(&r.to_vec())).collect(),
                    ds.class_labels()?,
                ),
            };
            m.accuracy = Some(accuracy(&pred, &truth)?);
        }
    }
    Ok(m)
}

/// Config saved next to a model, if any, as the base for data-source flags.
fn saved_config(model_path: &Path) -> Result<Option<RunConfig>> {
    let path = model_path.parent().unwrap_or(Path::new(".")).join("config.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    let c = serde_json::from_str(&text).map_err(|e| IgnError::Schema(format!("{}: {e}", path.display())))?;
    Ok(Some(c))
}

fn load_model(path: &Path) -> Result<ModelFile> {
    if !path.exists() {
        return Err(IgnError::Schema(format!("model file {} not found", path.display())));
    }
    ModelFile::load(path)
}

fn pick_split(c: &RunConfig, which: &str) -> Result<Dataset> {
    match which {
        "all" => c.dataset(),
        "train" => Ok(c.splits()?.0),
        "test" => Ok(c.splits()?.1),
        other => Err(IgnError::Schema(format!("split must be all, train or test, got '{other}'"))),
    }
}

pub fn eval(model_path: &Path, args: &ConfigArgs, which: &str, raw_rmse: bool, output: Option<&Path>) -> Result<()> {
    let model = load_model(model_path)?;
    let c = args.resolve(saved_config(model_path)?)?;
    let mut ds = pick_split(&c, which)?;
    ds.task = model.task;
    let metrics = evaluate(&model, &ds, raw_rmse, false)?;
    let text = serde_json::to_string(&metrics)?;
    println!("{text}");
    if let Some(path) = output {
        write_json(path, &metrics)?;
    }
    Ok(())
}

pub fn predict(
    model_path: &Path,
    input: &Path,
    want_variance: bool,
    drop: Option<&str>,
    delimiter: char,
    output: Option<&Path>,
) -> Result<()> {
    let model = load_model(model_path)?;
    if !input.exists() {
        return Err(IgnError::Schema(format!("input file {} not found", input.display())));
    }
    let (raw_x, _) = load_features(input, delimiter as u8, drop)?;
    let x = model.prepare_inputs(&raw_x)?;
    let d = delimiter.to_string();
    let mut lines: Vec<String> = Vec::with_capacity(x.nrows() + 1);
    match (&model.task, &model.heads) {
        (TaskKind::Regression, Heads::Single { params }) | (TaskKind::Classification, Heads::Single { params }) => {
            let pred = gp_predict(params, &x, CovarianceMode::Diag, false)?;
            let var = pred.variance();
            let (mean, var) = match (model.task, &model.normalizer) {
                (TaskKind::Regression, Some(nz)) => (nz.inverse_y(&pred.mean), nz.inverse_variance(&var)),
                _ => (pred.mean.clone(), var),
            };
            let mut header = vec!["mean"];
            if want_variance {
                header.push("variance");
            }
            let probs = if model.task == TaskKind::Classification {
                header.push("probability");
                Some(model.class_probabilities(&x)?)
            } else {
                None
            };
            lines.push(header.join(&d));
            for i in 0..x.nrows() {
                let mut row = vec![mean[i].to_string()];
                if want_variance {
                    row.push(var[i].to_string());
                }
                if let Some(p) = &probs {
                    row.push(p[[i, 0]].to_string());
                }
                lines.push(row.join(&d));
            }
        }
        (_, Heads::OneVsAll { heads }) => {
            let probs = model.class_probabilities(&x)?;
            let mut header = vec!["class".to_string()];
            header.extend((0..heads.len()).map(|c| format!("p{c}")));
            lines.push(header.join(&d));
            for r in probs.rows() {
                let mut row = vec![argmax_lowest(&r.to_vec()).to_string()];
                row.extend(r.iter().map(|p| p.to_string()));
                lines.push(row.join(&d));
            }
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    match output {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn ablate(c: &RunConfig, out: &Path) -> Result<()> {
    write_run_config(c, out)?;
    let (train_set, test_set, _) = normalized_splits(c)?;
    let spec = AblationSpec {
        task: c.task,
        m_grid: c.m_grid.clone(),
        repeats: c.repeats,
        model: c.model_config(train_set.dim()),
        train: c.train_config(),
        jobs: c.jobs,
    };
    let result = run_ablation(&spec, &train_set, &test_set)?;
    write_json(&out.join("ablation.json"), &result)?;
    let table = result.table();
    std::fs::write(out.join("ablation.txt"), &table)?;
    result.write_plot_data(&out.join("ablation_plot.csv"))?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct InspectRow {
    inducing: usize,
    exemplars: Vec<InspectHit>,
}

#[derive(Serialize)]
struct InspectHit {
    row: usize,
    kernel: f64,
}

pub fn inspect(model_path: &Path, args: &ConfigArgs, k: usize, head: usize, output: Option<&Path>) -> Result<()> {
    let model = load_model(model_path)?;
    let c = args.resolve(saved_config(model_path)?)?;
    let heads = model.heads.all();
    let params = *heads
        .get(head)
        .ok_or_else(|| IgnError::Schema(format!("model has {} head(s), asked for {head}", heads.len())))?;
    let full = c.dataset()?;
    let (train_idx, _) = split_indices(full.len(), c.train_fraction, c.seed)?;
    let train = full.subset(&train_idx);
    let x = model.prepare_inputs(&train.x)?;
    let hits: Vec<Vec<Exemplar>> = nearest_exemplars(params, &x, k)?;
    let rows: Vec<InspectRow> = hits
        .into_iter()
        .enumerate()
        .map(|(j, list)| InspectRow {
            inducing: j,
            exemplars: list
                .into_iter()
                .map(|e| InspectHit {
                    row: train_idx[e.index],
                    kernel: e.kernel,
                })
                .collect(),
        })
        .collect();
    for r in &rows {
        let cells: Vec<String> = r.exemplars.iter().map(|h| format!("{}({:.6})", h.row, h.kernel)).collect();
        println!("z{}: {}", r.inducing, cells.join(" "));
    }
    if let Some(p) = output {
        write_json(p, &rows)?;
    }
    Ok(())
}
