//! `dcsd`: train, probe, generate blobs and plot loss curves.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcsd_core::checkpoint::Checkpoint;
use dcsd_core::config::{FeatureSource, ProbeConfig, TrainConfig};
use dcsd_core::data::{load_data_dir, write_blob_dir, BlobSpec, DataSplits};
use dcsd_core::evaluation::{clustering_diagnostics, linear_probe};
use dcsd_core::rundir::{write_atomic, RunDirectory};
use dcsd_core::trainer::train;
use dcsd_core::Error;

/// Environment variable naming the default data directory.
pub const DATA_ENV: &str = "DCSD_DATA";

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "dcsd",
    version,
    about = "Deep clustering with multi-exit self-distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and populate a run directory.
    Train(TrainArgs),
    /// Fit a linear classifier on frozen teacher features of a checkpoint.
    Probe(ProbeArgs),
    /// Write a labeled Gaussian-blob dataset (train.txt and test.txt).
    GenBlobs(GenBlobsArgs),
    /// Render loss curves of one or more metrics files.
    Plot(PlotArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data directory (defaults to $DCSD_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Teacher cross-entropy only: alpha = 0, lambda = 0, no student terms.
    #[arg(long)]
    no_distill: bool,
    /// Write every epoch's pseudo-labels to assignments/.
    #[arg(long)]
    dump_assignments: bool,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Data directory with train and test splits (defaults to $DCSD_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory receiving probe.csv and probe.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "pooled_teacher")]
    feature_source: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenBlobsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_per_class: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    test_per_class: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics files; each becomes one curve named after its run directory.
    #[arg(long, num_args = 1.., required = true)]
    metrics: Vec<PathBuf>,
    /// Output SVG image.
    #[arg(long)]
    out: PathBuf,
    /// Column to plot.
    #[arg(long, default_value = "loss_total")]
    column: String,
    /// Merged table path (defaults to the image path with a .csv extension).
    #[arg(long)]
    table: Option<PathBuf>,
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
            Error::Diverged { .. } | Error::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_IO,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Probe(a) => cmd_probe(a),
        Command::GenBlobs(a) => cmd_gen_blobs(a),
        Command::Plot(a) => plot::cmd_plot(&a.metrics, &a.out, &a.column, a.table.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == EXIT_USAGE {
                eprintln!("\nFor usage, run: dcsd --help");
            }
            ExitCode::from(f.code)
        }
    }
}

fn data_dir(flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    flag.or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from)).ok_or_else(|| {
        Failure::usage(format!(
            "missing data directory: pass --data DIR or set {DATA_ENV}\n\nUsage: dcsd train --config PATH --data DIR --out DIR [--seed N] [--no-distill]"
        ))
    })
}

/// Defaults, then the config file, then flags.
fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        cfg.apply_kv_str(&text)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    }
    for item in &args.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.dump_assignments {
        cfg.dump_assignments = true;
    }
    if args.no_distill {
        cfg = cfg.without_distillation();
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = resolve_config(&args)?;
    let dir = data_dir(args.data.clone())?;
    let DataSplits { train: data, .. } = load_data_dir(&dir, None)?;
    dcsd_core::trainer::resolve_input_dim(&mut cfg, &data);
    cfg.validate()?;
    let run = RunDirectory::create(&args.out)?;
    let outcome = train(cfg, &data, Some(&run))?;
    if let (Some(table), Some(labels)) = (&outcome.last_table, data.labels()) {
        let diag = clustering_diagnostics(table, labels)?;
        write_atomic(
            &run.reports_dir().join("diagnostics.txt"),
            diag.to_kv_string().as_bytes(),
        )?;
        log::info!("final pseudo-label NMI {:.4}", diag.nmi);
    }
    println!("{}", run.final_checkpoint_path().display());
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let dir = data_dir(args.data)?;
    let splits = load_data_dir(&dir, ck.normalization.as_ref())?;
    let test = splits
        .test
        .ok_or_else(|| Failure::io(format!("{}: no test split found", dir.display())))?;
    let defaults = ProbeConfig::default();
    let cfg = ProbeConfig {
        lr: args.lr.unwrap_or(defaults.lr),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        seed: args.seed.unwrap_or(defaults.seed),
        feature_source: args.feature_source.parse::<FeatureSource>()?,
        num_classes: None,
    };
    let (model, banks) = ck.restore()?;
    let result = linear_probe(&model, &banks, &splits.train, &test, &cfg)?;
    create_dir(&args.out)?;
    write_atomic(
        &args.out.join("probe.csv"),
        result.to_delimited().as_bytes(),
    )?;
    write_atomic(
        &args.out.join("probe.txt"),
        result.to_kv_string().as_bytes(),
    )?;
    println!("test_accuracy = {}", result.test_accuracy);
    Ok(())
}

fn cmd_gen_blobs(args: GenBlobsArgs) -> Result<(), Failure> {
    let spec = BlobSpec {
        n_per_class: args.n_per_class,
        num_classes: args.classes,
        dim: args.dim,
        separation: args.separation,
        seed: args.seed,
    };
    create_dir(&args.out)?;
    for p in write_blob_dir(&args.out, &spec, args.test_per_class)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}
