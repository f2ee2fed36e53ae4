//! `ufcmil` command-line front end.
//!
//! Subcommands: `generate` (synthetic dataset), `train` (checkpoint + log),
//! `eval` (report JSON + reliability CSV), `gradcheck` (finite-difference
//! verification). All commands honor `--seed` for bit-reproducibility and
//! `UFCMIL_THREADS` caps the worker pool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ufcmil::bagdata::{generate_to_dir, load_dataset, DataError, SynthConfig};
use ufcmil::calibrate::EntropyStatsTable;
use ufcmil::metrics::{build_report, summarize_entropy, ReliabilityBins};
use ufcmil::model::{load_checkpoint, save_checkpoint, ModelConfig};
use ufcmil::train::{
    evaluate, gradcheck, to_predictions, TrainConfig, TrainError, Trainer,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "ufcmil", version, about = "Multi-resolution MIL with calibrated uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-lesion dataset.
    Generate(GenerateArgs),
    /// Train a model and write a checkpoint plus a per-epoch log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    samples: usize,
    /// Resolution levels (coarsest grid refines 2× per level).
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Coarsest grid as WxH, e.g. 4x4.
    #[arg(long, default_value = "4x4")]
    grid: String,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Fraction of positive bags, in [0, 1].
    #[arg(long = "pos-frac", default_value_t = 0.3)]
    pos_frac: f64,
    /// Maximum lesion core side length in coarse cells.
    #[arg(long = "lesion-size", default_value_t = 2)]
    lesion_size: u32,
    #[arg(long = "noise-sigma", default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train/val/test fractions, comma separated.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (holding manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Enable SRLS calibration training.
    #[arg(long)]
    srls: bool,
    /// Entropy-snapshot epoch (defaults to 80% of epochs).
    #[arg(long = "record-epoch")]
    record_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient-accumulation window (parallelism width).
    #[arg(long)]
    window: Option<usize>,
    /// Reduction-head hidden width (defaults to max(d/2, 4)).
    #[arg(long)]
    hidden: Option<usize>,
    /// Per-epoch log CSV path (defaults to <out>.log.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// SRLS entropy-statistics CSV path (defaults to <out>.srls.csv).
    #[arg(long = "stats-out")]
    stats_out: Option<PathBuf>,
}

/// File-backed subset of the training options.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    delta: Option<f64>,
    alpha: Option<f64>,
    srls: Option<bool>,
    record_epoch: Option<usize>,
    seed: Option<u64>,
    window: Option<usize>,
    hidden: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report JSON output path (also printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Reliability-diagram CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Confidence bin count.
    #[arg(long, default_value_t = 15)]
    bins: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Central-difference step size.
    #[arg(long, default_value_t = 1e-3)]
    h: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Failure threshold on the max relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Invalid(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(msg) => CliError::Usage(msg),
            TrainError::Data(d) => d.into(),
            TrainError::Tensor(t) => CliError::Numeric(t.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if let Ok(threads) = std::env::var("UFCMIL_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("UFCMIL_THREADS must be a positive integer");
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn parse_grid(s: &str) -> Result<(u32, u32), CliError> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| CliError::Usage(format!("grid '{s}' must look like 4x4")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<u32>()
            .map_err(|_| CliError::Usage(format!("bad grid dimension '{v}'")))
    };
    Ok((parse(w)?, parse(h)?))
}

fn parse_splits(s: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad split fractions '{s}'")))?;
    if parts.len() != 3 {
        return Err(CliError::Usage(
            "split must be three comma-separated fractions".into(),
        ));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let (coarse_w, coarse_h) = parse_grid(&args.grid)?;
    let config = SynthConfig {
        samples: args.samples,
        feature_dim: args.dim,
        levels: args.levels,
        coarse_w,
        coarse_h,
        pos_fraction: args.pos_frac,
        lesion_size: args.lesion_size,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
        split_fractions: parse_splits(&args.split)?,
    };
    generate_to_dir(&config, &args.out)?;
    println!(
        "wrote {} bags ({} levels, {}x{} coarse grid, d={}) to {}",
        args.samples,
        args.levels,
        coarse_w,
        coarse_h,
        args.dim,
        args.out.display()
    );
    Ok(())
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let file = load_file_config(args.config.as_deref())?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        learning_rate: args.lr.or(file.learning_rate).unwrap_or(defaults.learning_rate),
        betas: defaults.betas,
        delta: args.delta.or(file.delta).unwrap_or(defaults.delta),
        alpha: args.alpha.or(file.alpha).unwrap_or(defaults.alpha),
        srls: args.srls || file.srls.unwrap_or(false),
        record_epoch: args.record_epoch.or(file.record_epoch),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
        window: args.window.or(file.window).unwrap_or(defaults.window),
    };

    let dataset = load_dataset(&args.data)?;
    let train_bags: Vec<_> = dataset.split_bags("train").into_iter().cloned().collect();
    if train_bags.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no bags tagged 'train'",
            args.data.display()
        )));
    }
    let mut model_cfg = ModelConfig::new(
        dataset.manifest.feature_dim as usize,
        dataset.manifest.levels as usize,
    );
    if let Some(hidden) = args.hidden.or(file.hidden) {
        model_cfg.hidden = hidden;
    }

    let mut trainer =
        Trainer::new(model_cfg, train_cfg).map_err(CliError::from)?;
    trainer.train(&train_bags)?;

    for entry in &trainer.log {
        println!(
            "epoch {:>3} [{}] lr {:.3e} loss {:.5} acc {:.3}",
            entry.epoch, entry.phase, entry.lr, entry.mean_loss, entry.train_accuracy
        );
    }

    save_checkpoint(&args.out, &trainer.params)?;
    let log_path = args
        .log
        .unwrap_or_else(|| with_suffix(&args.out, ".log.csv"));
    let mut csv = String::from("epoch,phase,lr,mean_loss,train_accuracy\n");
    for e in &trainer.log {
        writeln!(
            csv,
            "{},{},{},{},{}",
            e.epoch, e.phase, e.lr, e.mean_loss, e.train_accuracy
        )
        .unwrap();
    }
    fs::write(&log_path, csv).map_err(|e| CliError::Data(format!("{}: {e}", log_path.display())))?;

    if let Some(table) = &trainer.stats_table {
        let stats_path = args
            .stats_out
            .unwrap_or_else(|| with_suffix(&args.out, ".srls.csv"));
        write_stats(table, &stats_path)?;
    }
    println!("checkpoint written to {}", args.out.display());
    Ok(())
}

fn write_stats(table: &EntropyStatsTable, path: &Path) -> Result<(), CliError> {
    fs::write(path, table.to_csv())
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let dataset = load_dataset(&args.data)?;
    let bags: Vec<_> = dataset
        .split_bags(&args.split)
        .into_iter()
        .cloned()
        .collect();
    if bags.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no bags tagged '{}'",
            args.data.display(),
            args.split
        )));
    }
    let params = load_checkpoint(&args.checkpoint)?;

    // The architecture is encoded in the checkpoint shapes.
    let levels = params.levels.len();
    let d = params.levels[0].cls.cols();
    let hidden = params.levels[0].head.w1.cols();
    let mut model_cfg = ModelConfig::new(d, levels);
    model_cfg.hidden = hidden;
    if !params.conforms(&model_cfg) {
        return Err(CliError::Data(format!(
            "{}: inconsistent checkpoint shapes",
            args.checkpoint.display()
        )));
    }
    if d != dataset.manifest.feature_dim as usize || levels != dataset.manifest.levels as usize {
        return Err(CliError::Data(format!(
            "checkpoint ({levels} levels, d={d}) does not match dataset ({} levels, d={})",
            dataset.manifest.levels, dataset.manifest.feature_dim
        )));
    }

    let evals = evaluate(&params, &model_cfg, &bags)?;
    let predictions = to_predictions(&evals);
    let mut per_resolution: Vec<Vec<f64>> = vec![Vec::new(); levels];
    for bag_eval in &evals {
        for (r, h) in bag_eval.level_entropy.iter().enumerate() {
            per_resolution[r].extend_from_slice(h);
        }
    }
    let report = build_report(
        &predictions,
        args.bins,
        &[10, 30],
        summarize_entropy(&per_resolution),
    )
    .map_err(|e| CliError::Data(e.to_string()))?;

    let json = report.to_json();
    println!("{json}");
    if let Some(path) = &args.report {
        fs::write(path, format!("{json}\n"))
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    if let Some(path) = &args.csv {
        let bins = ReliabilityBins {
            bins: report.bins.clone(),
            total: predictions.len(),
        };
        fs::write(path, bins.to_csv())
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if args.h <= 0.0 {
        return Err(CliError::Usage(format!("step h = {} must be positive", args.h)));
    }
    let report = gradcheck(args.h, args.seed).map_err(CliError::from)?;
    println!(
        "max relative error {:.6e} (worst: {}, {} elements over {} parameters)",
        report.max_rel_error, report.worst_param, report.elements_checked, report.params_checked
    );
    if report.max_rel_error < args.tolerance {
        println!("PASS (tolerance {:.1e})", args.tolerance);
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {:.6e} >= {:.1e}",
            report.max_rel_error, args.tolerance
        )))
    }
}
