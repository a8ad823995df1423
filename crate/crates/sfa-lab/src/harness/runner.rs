//! Drives whole experiments: one training run per seed, CSV outputs,
//! boundary checkpoints, hyperparameter sweeps, and post-hoc checkpoint
//! merging. Everything written here is byte-deterministic: the same
//! config and seeds produce identical files on every rerun.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::data::TaskStream;
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use crate::harness::config::ExperimentConfig;
use crate::merge::{self, MergeWeights, TaskVector};
use crate::metrics::{final_average_accuracy, forgetting, RunHistory};
use crate::nnet::{masked_accuracy, MlpSpec, ModelParams};
use crate::param::{l2_distance, ParamVector};
use crate::trainers::{sequential_run, StrategyConfig};
use crate::{Error, Result};

/// Format a value with six significant digits, the precision every CSV
/// column uses. Fixed-point notation so spreadsheet tools sort naturally.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".into();
    }
    let exponent = v.abs().log10().floor() as i32;
    let decimals = (5 - exponent).max(0) as usize;
    format!("{v:.decimals$}")
}

/// One training run's line in `summary.csv`.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub run_id: String,
    pub strategy: String,
    pub seed: u64,
    pub final_avg_accuracy: f64,
    /// Last recorded accuracy per task, index = task.
    pub per_task_final: Vec<f64>,
    /// Boundary-to-final accuracy drop per task, index = task.
    pub per_task_forgetting: Vec<f64>,
    /// Distance from the final weights to the last task's anchor.
    pub l2_to_anchor: f64,
}

impl SummaryRow {
    fn csv_line(&self) -> String {
        let mut line = format!(
            "{},{},{},{}",
            self.run_id,
            self.strategy,
            self.seed,
            format_sig6(self.final_avg_accuracy)
        );
        for v in &self.per_task_final {
            let _ = write!(line, ",{}", format_sig6(*v));
        }
        for v in &self.per_task_forgetting {
            let _ = write!(line, ",{}", format_sig6(*v));
        }
        let _ = write!(line, ",{}", format_sig6(self.l2_to_anchor));
        line
    }
}

fn summary_header(num_tasks: usize) -> String {
    let mut header = String::from("run_id,strategy,seed,final_avg_accuracy");
    for j in 0..num_tasks {
        let _ = write!(header, ",per_task_final_{j}");
    }
    for j in 0..num_tasks {
        let _ = write!(header, ",per_task_forgetting_{j}");
    }
    header.push_str(",l2_to_anchor");
    header
}

fn write_summary_csv(path: &Path, num_tasks: usize, rows: &[SummaryRow]) -> Result<()> {
    let mut text = summary_header(num_tasks);
    text.push('\n');
    for row in rows {
        text.push_str(&row.csv_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(Error::io(path))
}

fn write_history_csv(
    path: &Path,
    run_id: &str,
    strategy: &str,
    seed: u64,
    history: &RunHistory,
) -> Result<()> {
    let mut text = String::from("run_id,strategy,seed,global_step,train_task,eval_task,accuracy\n");
    for r in history.records() {
        let _ = writeln!(
            text,
            "{run_id},{strategy},{seed},{},{},{},{}",
            r.global_step,
            r.train_task,
            r.eval_task,
            format_sig6(r.accuracy)
        );
    }
    fs::write(path, text).map_err(Error::io(path))
}

/// Everything produced by one (strategy, seed) training run.
struct SeedRun {
    history: RunHistory,
    boundary_digests: Vec<u64>,
    summary: SummaryRow,
}

fn summarize(
    run_id: String,
    strategy: String,
    seed: u64,
    history: &RunHistory,
) -> Result<SummaryRow> {
    let n = history.num_tasks();
    let final_avg_accuracy = final_average_accuracy(history)?;
    let mut last_seen: Vec<Option<f64>> = vec![None; n];
    for r in history.records() {
        last_seen[r.eval_task] = Some(r.accuracy);
    }
    let per_task_final = last_seen
        .into_iter()
        .enumerate()
        .map(|(j, v)| v.ok_or_else(|| Error::Domain(format!("task {j} was never evaluated"))))
        .collect::<Result<Vec<f64>>>()?;
    let per_task_forgetting = (0..n)
        .map(|j| forgetting(history, j))
        .collect::<Result<Vec<f64>>>()?;
    let boundaries = history.boundaries();
    // The final task's anchor is the model entering it: the second-to-last
    // boundary, or the initial weights when one phase trained everything.
    let anchor = if boundaries.len() >= 2 {
        &boundaries[boundaries.len() - 2].params
    } else {
        history.initial_params()
    };
    let l2_to_anchor = l2_distance(history.final_params()?, anchor)?;
    Ok(SummaryRow {
        run_id,
        strategy,
        seed,
        final_avg_accuracy,
        per_task_final,
        per_task_forgetting,
        l2_to_anchor,
    })
}

fn run_one_seed(
    stream: &TaskStream,
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
) -> Result<SeedRun> {
    let strategy_name = cfg.strategy.name();
    let run_id = format!("{strategy_name}-seed{seed}");
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let history = sequential_run(stream, &cfg.spec, &cfg.strategy, &cfg.sgd, seed)?;
    write_history_csv(&dir.join("history.csv"), &run_id, strategy_name, seed, &history)?;

    let mut parents: Vec<u64> = Vec::new();
    let mut boundary_digests = Vec::new();
    for (k, boundary) in history.boundaries().iter().enumerate() {
        let params = ModelParams::from_flat(cfg.spec.clone(), boundary.params.clone())?;
        let tasks = stream.tasks()[..boundary.trained_tasks]
            .iter()
            .map(|t| t.name.clone())
            .collect();
        let ckpt = Checkpoint::new(
            params,
            Provenance {
                strategy: strategy_name.to_string(),
                tasks,
                seed,
                parents: parents.clone(),
            },
        )?;
        let digest = ckpt.digest();
        save_checkpoint(&ckpt, &dir.join(format!("boundary-{k}.sfac")))?;
        parents = vec![digest];
        boundary_digests.push(digest);
    }

    let summary = summarize(run_id, strategy_name.to_string(), seed, &history)?;
    Ok(SeedRun {
        history,
        boundary_digests,
        summary,
    })
}

/// Run `f` over `items` on up to `jobs` worker threads. Results come back
/// in input order, and errors surface in input order too, so a parallel
/// run fails identically to a serial one.
fn run_pool<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let workers = jobs.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = (0..items.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let result = f(i, &items[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .expect("worker pool fills every slot before the scope ends")
        })
        .collect()
}

fn run_seeds(
    cfg: &ExperimentConfig,
    stream: &TaskStream,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<SeedRun>> {
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    run_pool(jobs, &cfg.seeds, |_, &seed| {
        let dir = out_dir.join(format!("{}-seed{seed}", cfg.strategy.name()));
        run_one_seed(stream, cfg, seed, &dir)
    })
}

/// Train every seed in the config, writing per-run `history.csv` files and
/// boundary checkpoints under `out_dir/<strategy>-seed<seed>/` plus one
/// `summary.csv` covering all seeds. Returns the summary rows in seed
/// order.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<SummaryRow>> {
    let stream = cfg.stream.build()?;
    let runs = run_seeds(cfg, &stream, out_dir, jobs)?;
    let rows: Vec<SummaryRow> = runs.into_iter().map(|r| r.summary).collect();
    write_summary_csv(&out_dir.join("summary.csv"), stream.num_tasks(), &rows)?;
    Ok(rows)
}

const SWEEP_AXES: &[&str] = &[
    "p",
    "beta",
    "lambda",
    "past_fraction",
    "ta_weight",
    "density",
];

fn override_axis(strategy: &StrategyConfig, axis: &str, v: f64) -> Result<StrategyConfig> {
    let mut swept = strategy.clone();
    let applies = match (&mut swept, axis) {
        (StrategyConfig::Sfa(c), "p") => {
            c.p = v;
            true
        }
        (StrategyConfig::Sfa(c), "beta") => {
            c.beta = v;
            true
        }
        (StrategyConfig::Penalty(c), "lambda") => {
            c.lambda = v;
            true
        }
        (StrategyConfig::Rehearsal { past_fraction, .. }, "past_fraction") => {
            *past_fraction = v;
            true
        }
        _ => false,
    };
    if applies {
        Ok(swept)
    } else {
        Err(Error::Config(format!(
            "axis `{axis}` does not apply to strategy `{}`",
            strategy.name()
        )))
    }
}

/// Rerun the configured experiment once per axis value, collecting every
/// run's summary into `out_dir/sweep.csv`. The `p`, `beta`, `lambda`, and
/// `past_fraction` axes override the matching strategy knob and produce
/// full per-value experiment directories. The `ta_weight` and `density`
/// axes instead train one sequential base run per seed, then evaluate a
/// post-hoc task-arithmetic (or TIES) merge of the final weights back onto
/// the first task boundary at each value.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: &str,
    values: &[String],
    out_dir: &Path,
    jobs: usize,
) -> Result<()> {
    if !SWEEP_AXES.contains(&axis) {
        return Err(Error::Config(format!(
            "unknown sweep axis `{axis}` (expected one of {})",
            SWEEP_AXES.join(", ")
        )));
    }
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    let parsed = values
        .iter()
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("sweep value `{s}` is not a number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Config(format!("sweep value `{s}` is not finite")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;

    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let rows = if matches!(axis, "ta_weight" | "density") {
        run_merge_sweep(cfg, axis, values, &parsed, out_dir, jobs)?
    } else {
        let mut rows = Vec::new();
        for (value_str, &v) in values.iter().zip(&parsed) {
            let mut sub = cfg.clone();
            sub.strategy = override_axis(&cfg.strategy, axis, v)?;
            let value_dir = out_dir.join(format!("{axis}-{}", value_str.trim()));
            for row in run_experiment(&sub, &value_dir, jobs)? {
                rows.push((value_str.trim().to_string(), row));
            }
        }
        rows
    };

    let num_tasks = rows[0].1.per_task_final.len();
    let mut text = format!("axis,value,{}\n", summary_header(num_tasks));
    for (value_str, row) in &rows {
        let _ = writeln!(text, "{axis},{value_str},{}", row.csv_line());
    }
    let path = out_dir.join("sweep.csv");
    fs::write(&path, text).map_err(Error::io(path))
}

fn run_merge_sweep(
    cfg: &ExperimentConfig,
    axis: &str,
    values: &[String],
    parsed: &[f64],
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<(String, SummaryRow)>> {
    if !matches!(cfg.strategy, StrategyConfig::Sequential) {
        return Err(Error::Config(format!(
            "axis `{axis}` merges a finished sequential run post hoc, \
             but the config says strategy `{}`",
            cfg.strategy.name()
        )));
    }
    let stream = cfg.stream.build()?;
    if stream.num_tasks() < 2 {
        return Err(Error::Config(format!(
            "axis `{axis}` needs at least two tasks: the merge interpolates \
             between the first boundary and the final weights"
        )));
    }
    let base_dir = out_dir.join("base");
    let base_runs = run_seeds(cfg, &stream, &base_dir, jobs)?;
    let base_rows: Vec<SummaryRow> = base_runs.iter().map(|r| r.summary.clone()).collect();
    write_summary_csv(&base_dir.join("summary.csv"), stream.num_tasks(), &base_rows)?;

    let mode = if axis == "ta_weight" {
        "task_arithmetic"
    } else {
        "ties"
    };
    let mut rows = Vec::new();
    for (value_str, &v) in values.iter().zip(parsed) {
        let value_dir = out_dir.join(format!("{axis}-{}", value_str.trim()));
        fs::create_dir_all(&value_dir).map_err(Error::io(&value_dir))?;
        for (run, &seed) in base_runs.iter().zip(&cfg.seeds) {
            let row = merge_one_base_run(&stream, &cfg.spec, run, seed, axis, v, mode, &value_dir)?;
            rows.push((value_str.trim().to_string(), row));
        }
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn merge_one_base_run(
    stream: &TaskStream,
    spec: &MlpSpec,
    run: &SeedRun,
    seed: u64,
    axis: &str,
    v: f64,
    mode: &str,
    dir: &Path,
) -> Result<SummaryRow> {
    let history = &run.history;
    let boundaries = history.boundaries();
    let anchor = &boundaries[0].params;
    let tau = merge::task_vector(anchor, history.final_params()?)?;
    let merged_flat = if axis == "ta_weight" {
        merge::task_arithmetic(
            anchor,
            std::slice::from_ref(&tau),
            &MergeWeights::new(vec![v])?,
        )?
    } else {
        merge::ties_merge(
            anchor,
            std::slice::from_ref(&tau),
            v,
            &MergeWeights::new(vec![1.0])?,
        )?
    };
    let merged = ModelParams::from_flat(spec.clone(), merged_flat)?;

    let n = stream.num_tasks();
    let mut per_task_final = Vec::with_capacity(n);
    for task in stream.tasks() {
        per_task_final.push(masked_accuracy(&merged, &task.eval, &task.classes)?);
    }
    let final_avg_accuracy = per_task_final.iter().sum::<f64>() / n as f64;
    let mut per_task_forgetting = Vec::with_capacity(n);
    for (j, &merged_acc) in per_task_final.iter().enumerate() {
        let boundary = boundaries
            .iter()
            .find(|b| b.trained_tasks > j)
            .expect("a sequential run records one boundary per task");
        let at_boundary = history
            .records()
            .iter()
            .find(|r| r.global_step == boundary.global_step && r.eval_task == j)
            .map(|r| r.accuracy)
            .ok_or_else(|| {
                Error::Domain(format!(
                    "no record for task {j} at its boundary step {}",
                    boundary.global_step
                ))
            })?;
        per_task_forgetting.push(at_boundary - merged_acc);
    }
    let l2_to_anchor = l2_distance(merged.flat(), anchor)?;

    let ckpt = Checkpoint::new(
        merged,
        Provenance {
            strategy: format!("merge:{mode}"),
            tasks: stream.tasks().iter().map(|t| t.name.clone()).collect(),
            seed,
            parents: vec![
                run.boundary_digests[0],
                *run.boundary_digests.last().unwrap(),
            ],
        },
    )?;
    save_checkpoint(&ckpt, &dir.join(format!("merged-seed{seed}.sfac")))?;

    Ok(SummaryRow {
        run_id: format!("{mode}-seed{seed}"),
        strategy: mode.to_string(),
        seed,
        final_avg_accuracy,
        per_task_final,
        per_task_forgetting,
        l2_to_anchor,
    })
}

/// How [`merge_checkpoints`] combines its inputs.
#[derive(Debug, Clone)]
pub enum MergeMode {
    /// β·first + (1−β)·second over exactly two checkpoints.
    Average { beta: f64 },
    /// First checkpoint is the base; each later one contributes the task
    /// vector (its weights minus the base), scaled by its weight
    /// (default 1).
    TaskArithmetic { weights: Option<Vec<f64>> },
    /// Task-vector merge with trim/elect/merge sign resolution.
    Ties {
        density: f64,
        weights: Option<Vec<f64>>,
    },
    /// Per-coordinate precision-weighted average. Every input must carry a
    /// cached fisher block.
    Fisher { lambdas: Option<Vec<f64>> },
}

impl MergeMode {
    fn name(&self) -> &'static str {
        match self {
            MergeMode::Average { .. } => "average",
            MergeMode::TaskArithmetic { .. } => "task_arithmetic",
            MergeMode::Ties { .. } => "ties",
            MergeMode::Fisher { .. } => "fisher",
        }
    }
}

fn weights_or_ones(weights: &Option<Vec<f64>>, n: usize) -> Result<MergeWeights> {
    match weights {
        Some(w) => MergeWeights::new(w.clone()),
        None => MergeWeights::new(vec![1.0; n]),
    }
}

fn base_and_vectors(loaded: &[Checkpoint]) -> Result<(&ParamVector, Vec<TaskVector>)> {
    if loaded.len() < 2 {
        return Err(Error::Config(
            "task-vector merges need a base checkpoint plus at least one fine-tuned checkpoint"
                .into(),
        ));
    }
    let base = loaded[0].params().flat();
    let vectors = loaded[1..]
        .iter()
        .map(|c| merge::task_vector(base, c.params().flat()))
        .collect::<Result<Vec<TaskVector>>>()?;
    Ok((base, vectors))
}

/// Merge saved checkpoints into a new one at `out`. The merged file's
/// provenance records the mode, the union of the inputs' task names, and
/// every input's digest as a parent. Returns the new checkpoint's digest.
pub fn merge_checkpoints(inputs: &[PathBuf], mode: &MergeMode, out: &Path) -> Result<u64> {
    if inputs.is_empty() {
        return Err(Error::Config("merge needs at least one input checkpoint".into()));
    }
    let loaded = inputs
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<Checkpoint>>>()?;
    let spec = loaded[0].spec();
    for (ckpt, path) in loaded.iter().zip(inputs).skip(1) {
        if ckpt.spec() != spec {
            return Err(Error::Config(format!(
                "checkpoint shapes differ: {} holds {:?} but {} holds {:?}",
                inputs[0].display(),
                spec.layer_sizes(),
                path.display(),
                ckpt.spec().layer_sizes()
            )));
        }
    }

    let merged_flat = match mode {
        MergeMode::Average { beta } => {
            if loaded.len() != 2 {
                return Err(Error::Config(format!(
                    "average merges exactly two checkpoints, got {}",
                    loaded.len()
                )));
            }
            merge::wise_ft(loaded[0].params().flat(), loaded[1].params().flat(), *beta)?
        }
        MergeMode::TaskArithmetic { weights } => {
            let (base, vectors) = base_and_vectors(&loaded)?;
            merge::task_arithmetic(base, &vectors, &weights_or_ones(weights, vectors.len())?)?
        }
        MergeMode::Ties { density, weights } => {
            let (base, vectors) = base_and_vectors(&loaded)?;
            merge::ties_merge(
                base,
                &vectors,
                *density,
                &weights_or_ones(weights, vectors.len())?,
            )?
        }
        MergeMode::Fisher { lambdas } => {
            let mut models = Vec::with_capacity(loaded.len());
            let mut fishers = Vec::with_capacity(loaded.len());
            for (ckpt, path) in loaded.iter().zip(inputs) {
                let fisher = ckpt.fisher().ok_or_else(|| {
                    Error::Config(format!(
                        "{} has no cached fisher information; run the fisher command over it first",
                        path.display()
                    ))
                })?;
                models.push(ckpt.params().flat().clone());
                fishers.push(fisher.clone());
            }
            merge::fisher_merge(&models, &fishers, &weights_or_ones(lambdas, loaded.len())?)?
        }
    };

    let mut tasks: Vec<String> = Vec::new();
    for ckpt in &loaded {
        for t in &ckpt.provenance().tasks {
            if !tasks.contains(t) {
                tasks.push(t.clone());
            }
        }
    }
    let merged = Checkpoint::new(
        ModelParams::from_flat(spec.clone(), merged_flat)?,
        Provenance {
            strategy: format!("merge:{}", mode.name()),
            tasks,
            seed: 0,
            parents: loaded.iter().map(|c| c.digest()).collect(),
        },
    )?;
    save_checkpoint(&merged, out)?;
    Ok(merged.digest())
}
