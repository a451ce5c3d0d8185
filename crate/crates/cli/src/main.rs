mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ign::IgnError;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "ign", version, about = "Train and query inducing Gaussian process networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory (created if missing).
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Report test metrics of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Which rows of the data source to score.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also report RMSE in raw target units.
        #[arg(long)]
        raw_rmse: bool,
        /// Write the metrics JSON here as well as to stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Predict for every row of a delimited file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Include the predictive variance column.
        #[arg(long)]
        variance: bool,
        /// Drop this column from the input before predicting.
        #[arg(long)]
        drop: Option<String>,
        #[arg(long, default_value = ",")]
        delimiter: char,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sweep the number of inducing points and record predictive variance.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// List the training rows nearest to each inducing point.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Head to inspect for one-vs-all models.
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Every run-config key as an optional flag; flags beat the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// regression or classification.
    #[arg(long)]
    task: Option<String>,
    /// Synthetic generator: levy, griewank, borehole, sin, blobs.
    #[arg(long = "gen", alias = "generator")]
    generator: Option<String>,
    /// Rows to generate.
    #[arg(long)]
    n: Option<String>,
    /// Input dimension for levy and griewank.
    #[arg(long)]
    dim: Option<String>,
    /// Number of blob classes.
    #[arg(long)]
    classes: Option<String>,
    /// Distance of blob centres from the origin.
    #[arg(long)]
    separation: Option<String>,
    /// Target noise std as a fraction of the clean-target std.
    #[arg(long)]
    noise: Option<String>,
    /// Delimited data file; overrides the generator.
    #[arg(long)]
    data: Option<String>,
    /// Target column name in --data.
    #[arg(long)]
    target: Option<String>,
    /// Field delimiter of --data.
    #[arg(long)]
    delimiter: Option<String>,
    /// Fraction of rows used for training.
    #[arg(long)]
    train_fraction: Option<String>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    hidden: Option<String>,
    /// Feature-space dimension d.
    #[arg(long)]
    feature_dim: Option<String>,
    /// Number of inducing points.
    #[arg(long)]
    m: Option<String>,
    /// rbf or dot.
    #[arg(long)]
    kernel: Option<String>,
    /// Initial RBF bandwidth in exp(-gamma * |a - b|^2).
    #[arg(long)]
    gamma: Option<String>,
    /// Learn the bandwidth.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    train_gamma: Option<String>,
    /// Give the pseudo-label head a bias term.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    head_bias: Option<String>,
    /// Initial noise std.
    #[arg(long)]
    init_sigma_eps: Option<String>,
    /// Initialize inducing points from embedded training rows.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    init_z_from_data: Option<String>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<String>,
    /// Minibatch size.
    #[arg(long)]
    batch_size: Option<String>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<String>,
    /// per-batch or n-over-b.
    #[arg(long)]
    loss_scaling: Option<String>,
    /// Parameter groups to freeze: feature-map, inducing, head, noise, kernel.
    #[arg(long)]
    freeze: Option<String>,
    /// Newton iterations per Laplace mode search.
    #[arg(long)]
    newton_max_iter: Option<String>,
    /// Newton convergence tolerance on the latent mode.
    #[arg(long)]
    newton_tol: Option<String>,
    /// Top-level seed for splits, initialization and shuffling.
    #[arg(long)]
    seed: Option<String>,
    /// Checkpoint interval in epochs (0 disables).
    #[arg(long)]
    checkpoint_every: Option<String>,
    /// Worker threads for one-vs-all heads and ablation cells.
    #[arg(long)]
    jobs: Option<String>,
    /// Inducing-point counts for ablate, comma separated.
    #[arg(long)]
    m_grid: Option<String>,
    /// Seeds per ablation grid point.
    #[arg(long)]
    repeats: Option<String>,
}

impl ConfigArgs {
    fn flags(&self) -> Vec<(&'static str, &String)> {
        let pairs: [(&'static str, &Option<String>); 32] = [
            ("task", &self.task),
            ("generator", &self.generator),
            ("n", &self.n),
            ("dim", &self.dim),
            ("classes", &self.classes),
            ("separation", &self.separation),
            ("noise", &self.noise),
            ("data", &self.data),
            ("target", &self.target),
            ("delimiter", &self.delimiter),
            ("train-fraction", &self.train_fraction),
            ("hidden", &self.hidden),
            ("feature-dim", &self.feature_dim),
            ("m", &self.m),
            ("kernel", &self.kernel),
            ("gamma", &self.gamma),
            ("train-gamma", &self.train_gamma),
            ("head-bias", &self.head_bias),
            ("init-sigma-eps", &self.init_sigma_eps),
            ("init-z-from-data", &self.init_z_from_data),
            ("epochs", &self.epochs),
            ("batch-size", &self.batch_size),
            ("lr", &self.lr),
            ("loss-scaling", &self.loss_scaling),
            ("freeze", &self.freeze),
            ("newton-max-iter", &self.newton_max_iter),
            ("newton-tol", &self.newton_tol),
            ("seed", &self.seed),
            ("checkpoint-every", &self.checkpoint_every),
            ("jobs", &self.jobs),
            ("m-grid", &self.m_grid),
            ("repeats", &self.repeats),
        ];
        pairs.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }

    /// Defaults, then `base` (e.g. a saved run config), then the file, then flags.
    fn resolve(&self, base: Option<RunConfig>) -> ign::Result<RunConfig> {
        let mut c = base.unwrap_or_default();
        if let Some(path) = &self.config {
            if !path.exists() {
                return Err(IgnError::Schema(format!("config file {} not found", path.display())));
            }
            c.apply_file(path)?;
        }
        for (k, v) in self.flags() {
            c.set(k, v)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| IgnError::Schema(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &IgnError) -> u8 {
    match e {
        IgnError::ClassHead { source, .. } => exit_code(source),
        IgnError::Diverged { .. }
        | IgnError::Numerical { .. }
        | IgnError::NotPositiveDefinite { .. }
        | IgnError::NewtonNonConvergence { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { config, out } => config.resolve(None).and_then(|c| commands::train(&c, &out)),
        Command::Eval {
            model,
            config,
            split,
            raw_rmse,
            output,
        } => commands::eval(&model, &config, &split, raw_rmse, output.as_deref()),
        Command::Predict {
            model,
            input,
            variance,
            drop,
            delimiter,
            output,
        } => commands::predict(&model, &input, variance, drop.as_deref(), delimiter, output.as_deref()),
        Command::Ablate { config, out } => config.resolve(None).and_then(|c| commands::ablate(&c, &out)),
        Command::Inspect {
            model,
            config,
            k,
            head,
            output,
        } => commands::inspect(&model, &config, k, head, output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
