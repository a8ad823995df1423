//! Command-line front end. Experiments are described by small
//! `key = value` config files; results land as CSV files and `.sfac`
//! checkpoints under an output directory chosen by `--out`, the
//! `SFA_LAB_OUT` environment variable, or the config's `out` key, in that
//! order.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sfa_lab::data::{digit_glyphs, load_idx, Dataset};
use sfa_lab::harness::checkpoint::{load_checkpoint, save_checkpoint};
use sfa_lab::harness::config::ExperimentConfig;
use sfa_lab::harness::runner::{
    format_sig6, merge_checkpoints, run_experiment, run_sweep, MergeMode,
};
use sfa_lab::merge::DEFAULT_TIES_DENSITY;
use sfa_lab::nnet::{accuracy, fisher_diagonal, masked_accuracy};
use sfa_lab::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sfa-lab",
    version,
    about = "Continual-learning experiments on small MLPs: train strategies \
             across task streams, sweep hyperparameters, and merge or evaluate \
             saved checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured strategy on its task stream, once per seed.
    Train(TrainArgs),
    /// Rerun the configured experiment across values of one hyperparameter.
    Sweep(SweepArgs),
    /// Combine saved checkpoints into a new one.
    Merge(MergeArgs),
    /// Report a saved checkpoint's accuracy on a dataset.
    Eval(EvalArgs),
    /// Compute fisher information for a checkpoint and cache it inside.
    Fisher(FisherArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment description: `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Where results go; overrides $SFA_LAB_OUT and the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train this single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; seeds are independent, so they parallelize freely.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Hyperparameter to vary: p, beta, lambda, past_fraction, ta_weight,
    /// or density.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values, e.g. `0.1,0.25,0.5,1`.
    #[arg(long)]
    values: String,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct MergeArgs {
    /// One of: average, task_arithmetic, ties, fisher.
    #[arg(long)]
    mode: String,
    /// Interpolation weight toward the first checkpoint (average only,
    /// default 0.5).
    #[arg(long)]
    beta: Option<f64>,
    /// Comma-separated per-model coefficients: task-vector scales for
    /// task_arithmetic/ties, lambdas for fisher. Default 1 each.
    #[arg(long)]
    weights: Option<String>,
    /// Fraction of each task vector kept by magnitude (ties only).
    #[arg(long)]
    density: Option<f64>,
    /// File the merged checkpoint is written to.
    #[arg(long)]
    out: PathBuf,
    /// Input checkpoints. Task-vector modes treat the first as the base.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Restrict scoring to these classes, e.g. `0,2,4`.
    #[arg(long)]
    classes: Option<String>,
}

#[derive(Args)]
struct FisherArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Examples to estimate over: a count, or `all` (the default).
    #[arg(long)]
    samples: Option<String>,
    /// Seed for subsampling when --samples is a count.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where the updated checkpoint goes; defaults to rewriting --ckpt.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file (optionally gzipped); requires --labels.
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file matching --images.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Use the built-in digit glyphs with this many examples per class.
    #[arg(long)]
    digits: Option<usize>,
    /// Noise seed for --digits.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Merge(args) => cmd_merge(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Fisher(args) => cmd_fisher(args),
    }
}

fn resolve_out(flag: Option<PathBuf>, cfg_out: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Some(v) = std::env::var_os("SFA_LAB_OUT") {
        return Ok(PathBuf::from(v));
    }
    if let Some(p) = cfg_out {
        return Ok(p.clone());
    }
    Err(Error::Config(
        "no output directory: pass --out, set SFA_LAB_OUT, or put `out = <dir>` in the config"
            .into(),
    ))
}

fn load_config(path: &std::path::Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let out = resolve_out(args.out, &cfg.out)?;
    let rows = run_experiment(&cfg, &out, args.jobs)?;
    for row in &rows {
        println!(
            "{}: final_avg_accuracy={}",
            row.run_id,
            format_sig6(row.final_avg_accuracy)
        );
    }
    println!("wrote {}", out.join("summary.csv").display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_config(&args.config, args.seed)?;
    let out = resolve_out(args.out, &cfg.out)?;
    let values: Vec<String> = args
        .values
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    if values.iter().any(String::is_empty) {
        return Err(Error::Config(format!(
            "--values has an empty entry: `{}`",
            args.values
        )));
    }
    run_sweep(&cfg, &args.axis, &values, &out, args.jobs)?;
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

fn parse_f64_list(text: &str, flag: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{flag} entry `{s}` is not a number")))
        })
        .collect()
}

fn cmd_merge(args: MergeArgs) -> Result<()> {
    let weights = args
        .weights
        .as_deref()
        .map(|w| parse_f64_list(w, "--weights"))
        .transpose()?;
    if args.beta.is_some() && args.mode != "average" {
        return Err(Error::Config(format!(
            "--beta only applies to mode average, not `{}`",
            args.mode
        )));
    }
    if args.density.is_some() && args.mode != "ties" {
        return Err(Error::Config(format!(
            "--density only applies to mode ties, not `{}`",
            args.mode
        )));
    }
    let mode = match args.mode.as_str() {
        "average" => {
            if weights.is_some() {
                return Err(Error::Config(
                    "average interpolates with --beta, not --weights".into(),
                ));
            }
            MergeMode::Average {
                beta: args.beta.unwrap_or(0.5),
            }
        }
        "task_arithmetic" => MergeMode::TaskArithmetic { weights },
        "ties" => MergeMode::Ties {
            density: args.density.unwrap_or(DEFAULT_TIES_DENSITY),
            weights,
        },
        "fisher" => MergeMode::Fisher { lambdas: weights },
        other => {
            return Err(Error::Config(format!(
                "unknown merge mode `{other}` (expected average, task_arithmetic, ties, or fisher)"
            )))
        }
    };
    let digest = merge_checkpoints(&args.inputs, &mode, &args.out)?;
    println!("wrote {} (digest {digest:016x})", args.out.display());
    Ok(())
}

fn build_dataset(args: &DataArgs) -> Result<Dataset> {
    match (&args.images, &args.labels, args.digits) {
        (Some(images), Some(labels), None) => load_idx(images, labels),
        (None, None, Some(n)) => digit_glyphs(args.data_seed, n),
        _ => Err(Error::Config(
            "pass either --images with --labels, or --digits <n-per-class>".into(),
        )),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let data = build_dataset(&args.data)?;
    let acc = match args.classes.as_deref() {
        Some(spec) => {
            let classes = spec
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::Config(format!("--classes entry `{s}` is not a class index"))
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            let kept: Vec<usize> = data
                .labels()
                .iter()
                .enumerate()
                .filter(|(_, label)| classes.contains(label))
                .map(|(i, _)| i)
                .collect();
            if kept.is_empty() {
                return Err(Error::Config(
                    "no examples carry any of the requested classes".into(),
                ));
            }
            masked_accuracy(ckpt.params(), &data.select(&kept), &classes)?
        }
        None => accuracy(ckpt.params(), &data)?,
    };
    println!("accuracy={}", format_sig6(acc));
    Ok(())
}

fn cmd_fisher(args: FisherArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let data = build_dataset(&args.data)?;
    let samples = match args.samples.as_deref() {
        None | Some("all") => None,
        Some(s) => Some(s.parse::<usize>().map_err(|_| {
            Error::Config(format!("--samples must be a count or `all`, got `{s}`"))
        })?),
    };
    let fisher = fisher_diagonal(ckpt.params(), &data, samples, args.seed)?;
    let entries = fisher.len();
    let out = args.out.unwrap_or_else(|| args.ckpt.clone());
    save_checkpoint(&ckpt.with_fisher(fisher)?, &out)?;
    println!(
        "cached fisher information ({entries} entries) in {}",
        out.display()
    );
    Ok(())
}
