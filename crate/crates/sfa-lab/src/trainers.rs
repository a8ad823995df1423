//! Training loops: plain SGD, SGD with periodic weight averaging back to an
//! anchor, L2- and Fisher-penalized (EWC) fine-tuning, rehearsal, and the
//! multi-task sequential driver that strings tasks together.
//!
//! Every loop draws batches from the same seeded shuffle machinery, so two
//! trainers given identical configs see identical batches — the various
//! trainer-equivalence identities in the tests depend on that.

use std::fmt::Write as _;

use crate::data::{buffer_update, mix_with_buffer, Dataset, RehearsalBuffer, TaskStream};
use crate::metrics::{Boundary, EvalRecord, RunHistory};
use crate::nnet::{
    accuracy, fisher_diagonal, init_params, loss_and_grad, masked_accuracy, Batch, FisherDiagonal,
    MlpSpec, ModelParams,
};
use crate::param::{check_same_len, weighted_average, ParamVector};
use crate::rng::Rng;
use crate::{Error, Result};

/// Optimizer settings shared by every trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Gradient steps per task.
    pub steps_per_task: usize,
    pub shuffle_seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.05,
            batch_size: 64,
            steps_per_task: 2000,
            shuffle_seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.steps_per_task == 0 {
            return Err(Error::Config("steps_per_task must be at least 1".into()));
        }
        Ok(())
    }
}

/// Periodic-averaging settings: merge every ⌊p·T⌋ steps with weight `beta`
/// on the anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SfaConfig {
    /// Averaging-frequency fraction in (0, 1]; 1 means a single terminal
    /// merge.
    pub p: f64,
    /// Anchor weight in [0, 1].
    pub beta: f64,
}

impl Default for SfaConfig {
    fn default() -> Self {
        SfaConfig { p: 1.0, beta: 0.5 }
    }
}

impl SfaConfig {
    /// Steps between merges: ⌊p·T⌋. Errors when that rounds to zero.
    pub fn cadence(&self, steps_per_task: usize) -> Result<usize> {
        if !self.p.is_finite() || !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!(
                "p must lie in (0, 1], got {}",
                self.p
            )));
        }
        if !self.beta.is_finite() || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        let cadence = (self.p * steps_per_task as f64).floor() as usize;
        if cadence == 0 {
            return Err(Error::Config(format!(
                "p = {} rounds to zero steps between merges for {} steps per task",
                self.p, steps_per_task
            )));
        }
        Ok(cadence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyKind {
    L2,
    Ewc,
}

/// Anchored-penalty settings for the L2 and EWC trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub lambda: f64,
    /// EWC only: examples drawn when re-estimating the Fisher at a task
    /// boundary; `None` uses the whole task.
    pub fisher_samples: Option<usize>,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        match (self.kind, self.fisher_samples) {
            (PenaltyKind::Ewc, Some(0)) => {
                Err(Error::Config("fisher_samples must be at least 1".into()))
            }
            (PenaltyKind::L2, Some(_)) => Err(Error::Config(
                "fisher_samples only applies to the ewc penalty".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// What happens between tasks.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyConfig {
    /// Plain SGD on each task in turn.
    Sequential,
    /// Periodic weight averaging back to the previous task's model.
    Sfa(SfaConfig),
    /// L2 or EWC penalty anchored at the previous task's model.
    Penalty(PenaltyConfig),
    /// Interleave buffered past examples into each task's batches.
    Rehearsal { past_fraction: f64, per_task_cap: usize },
    /// Upper baseline: one training phase over all tasks' data at once.
    Multitask,
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::Sequential => "sequential",
            StrategyConfig::Sfa(_) => "sfa",
            StrategyConfig::Penalty(p) => match p.kind {
                PenaltyKind::L2 => "l2",
                PenaltyKind::Ewc => "ewc",
            },
            StrategyConfig::Rehearsal { .. } => "rehearsal",
            StrategyConfig::Multitask => "multitask",
        }
    }

    pub fn validate(&self, sgd: &SgdConfig) -> Result<()> {
        match self {
            StrategyConfig::Sequential | StrategyConfig::Multitask => Ok(()),
            StrategyConfig::Sfa(c) => c.cadence(sgd.steps_per_task).map(|_| ()),
            StrategyConfig::Penalty(p) => p.validate(),
            StrategyConfig::Rehearsal {
                past_fraction,
                per_task_cap,
            } => {
                if !past_fraction.is_finite() || !(0.0..1.0).contains(past_fraction) {
                    return Err(Error::Config(format!(
                        "past_fraction must lie in [0, 1), got {past_fraction}"
                    )));
                }
                if *per_task_cap == 0 {
                    return Err(Error::Config("per_task_cap must be at least 1".into()));
                }
                Ok(())
            }
        }
    }
}

/// Seeded batch order: a fresh shuffle of the whole task every epoch, taken
/// ⌈n/batch_size⌉ batches at a time (the last batch of an epoch may be
/// short).
pub(crate) struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
    batch_size: usize,
}

impl BatchStream {
    pub(crate) fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        BatchStream {
            order,
            pos: 0,
            rng,
            batch_size,
        }
    }

    pub(crate) fn next_indices(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let take = self.batch_size.min(self.order.len() - self.pos);
        let slice = &self.order[self.pos..self.pos + take];
        self.pos += take;
        slice
    }
}

/// One gradient step: θ − α·∇L(θ) on the batch.
pub fn sgd_step(params: &ModelParams, batch: &Batch, alpha: f64) -> Result<ModelParams> {
    if !alpha.is_finite() {
        return Err(Error::Domain(format!("step size must be finite, got {alpha}")));
    }
    let (_, grad) = loss_and_grad(params, batch)?;
    let flat: Vec<f64> = params
        .flat()
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(t, g)| t - alpha * g)
        .collect();
    if !flat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("sgd_step"));
    }
    ModelParams::from_flat(params.spec().clone(), ParamVector::from_raw(flat))
}

fn check_task(params: &ModelParams, task: &Dataset) -> Result<()> {
    if task.is_empty() {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    check_same_len(
        "input features vs model",
        task.feature_dim(),
        params.spec().input_dim(),
    )?;
    if task.class_count() > params.spec().class_count() {
        return Err(Error::Dimension {
            context: "class space vs model outputs",
            left: task.class_count(),
            right: params.spec().class_count(),
        });
    }
    Ok(())
}

/// Shared driver: T steps of `step_fn` over seeded batches, reporting the
/// parameters after every step.
fn run_task<S, F>(
    start: ModelParams,
    task: &Dataset,
    sgd: &SgdConfig,
    mut step_fn: S,
    mut observe: F,
) -> Result<ModelParams>
where
    S: FnMut(usize, ModelParams, &Batch) -> Result<ModelParams>,
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    sgd.validate()?;
    check_task(&start, task)?;
    let mut stream = BatchStream::new(task.len(), sgd.batch_size, sgd.shuffle_seed);
    let mut params = start;
    for t in 1..=sgd.steps_per_task {
        let batch = Batch::from_dataset(task, stream.next_indices())?;
        params = step_fn(t, params, &batch)?;
        observe(t, &params)?;
    }
    Ok(params)
}

/// Plain SGD for `sgd.steps_per_task` steps.
pub fn sgd_train(start: &ModelParams, task: &Dataset, sgd: &SgdConfig) -> Result<ModelParams> {
    sgd_train_with(start, task, sgd, |_, _| Ok(()))
}

pub fn sgd_train_with<F>(
    start: &ModelParams,
    task: &Dataset,
    sgd: &SgdConfig,
    observe: F,
) -> Result<ModelParams>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    run_task(
        start.clone(),
        task,
        sgd,
        |_, p, b| sgd_step(&p, b, sgd.learning_rate),
        observe,
    )
}

/// SGD with periodic weight averaging toward the fixed anchor `theta_o`:
/// after every ⌊p·T⌋-th step the parameters become
/// β·θ_o + (1−β)·θ, and once more after step T when T isn't a multiple of
/// the cadence.
pub fn sfa_train(
    theta_o: &ModelParams,
    task: &Dataset,
    sgd: &SgdConfig,
    sfa: &SfaConfig,
) -> Result<ModelParams> {
    sfa_train_with(theta_o, task, sgd, sfa, |_, _| Ok(()))
}

pub fn sfa_train_with<F>(
    theta_o: &ModelParams,
    task: &Dataset,
    sgd: &SgdConfig,
    sfa: &SfaConfig,
    observe: F,
) -> Result<ModelParams>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    let cadence = sfa.cadence(sgd.steps_per_task)?;
    let anchor = theta_o.flat().clone();
    let spec = theta_o.spec().clone();
    let out = run_task(
        theta_o.clone(),
        task,
        sgd,
        |t, p, b| {
            let stepped = sgd_step(&p, b, sgd.learning_rate)?;
            if t.is_multiple_of(cadence) {
                let merged = weighted_average(&anchor, stepped.flat(), sfa.beta)?;
                ModelParams::from_flat(spec.clone(), merged)
            } else {
                Ok(stepped)
            }
        },
        observe,
    )?;
    if !sgd.steps_per_task.is_multiple_of(cadence) {
        let merged = weighted_average(&anchor, out.flat(), sfa.beta)?;
        return ModelParams::from_flat(theta_o.spec().clone(), merged);
    }
    Ok(out)
}

/// SGD on the penalized objective L + (λ/2)‖θ − θ_o‖²; each step is
/// θ − η·(∇L + λ(θ − θ_o)) with the anchor fixed for the whole task.
pub fn l2_train(
    theta_o: &ModelParams,
    task: &Dataset,
    sgd: &SgdConfig,
    lambda: f64,
) -> Result<ModelParams> {
    l2_train_with(theta_o, task, sgd, lambda, |_, _| Ok(()))
}

pub fn l2_train_with<F>(
    theta_o: &ModelParams,
    task: &Dataset,
    sgd: &SgdConfig,
    lambda: f64,
    observe: F,
) -> Result<ModelParams>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let anchor = theta_o.flat().clone();
    let spec = theta_o.spec().clone();
    let eta = sgd.learning_rate;
    run_task(
        theta_o.clone(),
        task,
        sgd,
        |_, p, b| {
            let (_, grad) = loss_and_grad(&p, b)?;
            let flat: Vec<f64> = p
                .flat()
                .as_slice()
                .iter()
                .zip(grad.as_slice())
                .zip(anchor.as_slice())
                .map(|((t, g), o)| t - eta * (g + lambda * (t - o)))
                .collect();
            if !flat.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("l2_train"));
            }
            ModelParams::from_flat(spec.clone(), ParamVector::from_raw(flat))
        },
        observe,
    )
}

/// SGD with a Fisher-weighted pull toward the anchor. Each step takes the
/// plain gradient step s = θ − η·∇L and then moves coordinate-wise toward
/// the anchor: s − ηλF_o⊙(s − θ_o).
pub fn ewc_train(
    theta_o: &ModelParams,
    fisher_o: &FisherDiagonal,
    task: &Dataset,
    sgd: &SgdConfig,
    lambda: f64,
) -> Result<ModelParams> {
    ewc_train_with(theta_o, fisher_o, task, sgd, lambda, |_, _| Ok(()))
}

pub fn ewc_train_with<F>(
    theta_o: &ModelParams,
    fisher_o: &FisherDiagonal,
    task: &Dataset,
    sgd: &SgdConfig,
    lambda: f64,
    observe: F,
) -> Result<ModelParams>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    check_same_len(
        "fisher length vs model",
        fisher_o.len(),
        theta_o.flat().len(),
    )?;
    let anchor = theta_o.flat().clone();
    let spec = theta_o.spec().clone();
    let eta_lambda = sgd.learning_rate * lambda;
    run_task(
        theta_o.clone(),
        task,
        sgd,
        |_, p, b| {
            let stepped = sgd_step(&p, b, sgd.learning_rate)?;
            let flat: Vec<f64> = stepped
                .flat()
                .as_slice()
                .iter()
                .zip(anchor.as_slice())
                .zip(fisher_o.as_slice())
                .map(|((s, o), f)| {
                    let m = eta_lambda * f;
                    s - m * (s - o)
                })
                .collect();
            if !flat.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("ewc_train"));
            }
            ModelParams::from_flat(spec.clone(), ParamVector::from_raw(flat))
        },
        observe,
    )
}

/// Plain SGD over the task blended with buffered past examples.
pub fn rehearsal_train(
    start: &ModelParams,
    task: &Dataset,
    buffer: &RehearsalBuffer,
    past_fraction: f64,
    sgd: &SgdConfig,
) -> Result<ModelParams> {
    rehearsal_train_with(start, task, buffer, past_fraction, sgd, |_, _| Ok(()))
}

pub fn rehearsal_train_with<F>(
    start: &ModelParams,
    task: &Dataset,
    buffer: &RehearsalBuffer,
    past_fraction: f64,
    sgd: &SgdConfig,
    observe: F,
) -> Result<ModelParams>
where
    F: FnMut(usize, &ModelParams) -> Result<()>,
{
    let mixed = mix_with_buffer(task, buffer, past_fraction)?;
    sgd_train_with(start, &mixed, sgd, observe)
}

/// Render the full resolved configuration as stable `key=value` lines.
fn render_config(
    spec: &MlpSpec,
    strategy: &StrategyConfig,
    sgd: &SgdConfig,
    seed: u64,
    num_tasks: usize,
) -> String {
    let mut s = String::new();
    let sizes: Vec<String> = spec.layer_sizes().iter().map(|n| n.to_string()).collect();
    let _ = writeln!(s, "layers={}", sizes.join(","));
    let _ = writeln!(s, "activation={}", spec.activation().name());
    let _ = writeln!(s, "strategy={}", strategy.name());
    match strategy {
        StrategyConfig::Sfa(c) => {
            let _ = writeln!(s, "p={}", c.p);
            let _ = writeln!(s, "beta={}", c.beta);
        }
        StrategyConfig::Penalty(p) => {
            let _ = writeln!(s, "lambda={}", p.lambda);
            if p.kind == PenaltyKind::Ewc {
                match p.fisher_samples {
                    Some(n) => {
                        let _ = writeln!(s, "fisher_samples={n}");
                    }
                    None => {
                        let _ = writeln!(s, "fisher_samples=all");
                    }
                }
            }
        }
        StrategyConfig::Rehearsal {
            past_fraction,
            per_task_cap,
        } => {
            let _ = writeln!(s, "past_fraction={past_fraction}");
            let _ = writeln!(s, "per_task_cap={per_task_cap}");
        }
        StrategyConfig::Sequential | StrategyConfig::Multitask => {}
    }
    let _ = writeln!(s, "learning_rate={}", sgd.learning_rate);
    let _ = writeln!(s, "batch_size={}", sgd.batch_size);
    let _ = writeln!(s, "steps_per_task={}", sgd.steps_per_task);
    let _ = writeln!(s, "shuffle_seed={}", sgd.shuffle_seed);
    let _ = writeln!(s, "seed={seed}");
    let _ = writeln!(s, "tasks={num_tasks}");
    s
}

fn record_evals(
    history: &mut RunHistory,
    stream: &TaskStream,
    global_step: usize,
    train_task: usize,
    params: &ModelParams,
) -> Result<()> {
    for (j, task) in stream.tasks().iter().enumerate() {
        let masked = masked_accuracy(params, &task.eval, &task.classes)?;
        let global = accuracy(params, &task.eval)?;
        history.push_record(EvalRecord {
            global_step,
            train_task,
            eval_task: j,
            accuracy: masked,
            global_accuracy: global,
        })?;
    }
    Ok(())
}

/// Train through every task of the stream in order and record the full
/// accuracy trace.
///
/// Parameters start from `init_params(spec, seed)`. The first task always
/// trains with plain SGD — there is nothing to anchor to, penalize against,
/// or rehearse yet; each strategy takes over from the second task on, with
/// its anchor rolled forward to the end-of-previous-task model. Every
/// task's eval split is scored every max(1, T/20) steps and at each task
/// boundary. The `Multitask` strategy instead trains a single phase of
/// num_tasks·T steps on the concatenation of all training sets.
pub fn sequential_run(
    stream: &TaskStream,
    spec: &MlpSpec,
    strategy: &StrategyConfig,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<RunHistory> {
    sgd.validate()?;
    strategy.validate(sgd)?;
    check_same_len(
        "stream features vs model",
        stream.feature_dim(),
        spec.input_dim(),
    )?;
    if stream.class_count() > spec.class_count() {
        return Err(Error::Dimension {
            context: "stream classes vs model outputs",
            left: stream.class_count(),
            right: spec.class_count(),
        });
    }

    let init = init_params(spec, seed);
    let num_tasks = stream.num_tasks();
    let echo = render_config(spec, strategy, sgd, seed, num_tasks);
    let mut history = RunHistory::new(num_tasks, init.flat().clone(), echo)?;
    let steps = sgd.steps_per_task;
    let eval_every = (steps / 20).max(1);

    if matches!(strategy, StrategyConfig::Multitask) {
        let parts: Vec<&Dataset> = stream.tasks().iter().map(|t| &t.train).collect();
        let all = Dataset::concat(&parts)?;
        let total = steps * num_tasks;
        let mt_sgd = SgdConfig {
            steps_per_task: total,
            shuffle_seed: Rng::mix(sgd.shuffle_seed, 0),
            ..sgd.clone()
        };
        let final_params = {
            let history = &mut history;
            sgd_train_with(&init, &all, &mt_sgd, |t, p| {
                if t.is_multiple_of(eval_every) && t < total {
                    record_evals(history, stream, t, 0, p)
                } else {
                    Ok(())
                }
            })?
        };
        record_evals(&mut history, stream, total, 0, &final_params)?;
        history.push_boundary(Boundary {
            global_step: total,
            trained_tasks: num_tasks,
            params: final_params.flat().clone(),
        })?;
        return Ok(history);
    }

    let mut current = init;
    let mut fisher: Option<FisherDiagonal> = None;
    let mut buffer = RehearsalBuffer::new(Rng::mix(seed, 0xB0FF));

    for (k, task) in stream.tasks().iter().enumerate() {
        let task_sgd = SgdConfig {
            shuffle_seed: Rng::mix(sgd.shuffle_seed, k as u64),
            ..sgd.clone()
        };
        let base = k * steps;
        current = {
            let history = &mut history;
            let observe = |t: usize, p: &ModelParams| -> Result<()> {
                if t.is_multiple_of(eval_every) && t < steps {
                    record_evals(history, stream, base + t, k, p)
                } else {
                    Ok(())
                }
            };
            if k == 0 {
                sgd_train_with(&current, &task.train, &task_sgd, observe)?
            } else {
                match strategy {
                    StrategyConfig::Sequential => {
                        sgd_train_with(&current, &task.train, &task_sgd, observe)?
                    }
                    StrategyConfig::Sfa(c) => {
                        sfa_train_with(&current, &task.train, &task_sgd, c, observe)?
                    }
                    StrategyConfig::Penalty(p) => match p.kind {
                        PenaltyKind::L2 => {
                            l2_train_with(&current, &task.train, &task_sgd, p.lambda, observe)?
                        }
                        PenaltyKind::Ewc => {
                            let f = fisher.as_ref().expect("fisher set at previous boundary");
                            ewc_train_with(&current, f, &task.train, &task_sgd, p.lambda, observe)?
                        }
                    },
                    StrategyConfig::Rehearsal { past_fraction, .. } => rehearsal_train_with(
                        &current,
                        &task.train,
                        &buffer,
                        *past_fraction,
                        &task_sgd,
                        observe,
                    )?,
                    StrategyConfig::Multitask => unreachable!("handled above"),
                }
            }
        };

        let boundary_step = base + steps;
        record_evals(&mut history, stream, boundary_step, k, &current)?;
        history.push_boundary(Boundary {
            global_step: boundary_step,
            trained_tasks: k + 1,
            params: current.flat().clone(),
        })?;

        match strategy {
            StrategyConfig::Penalty(p) if p.kind == PenaltyKind::Ewc => {
                fisher = Some(fisher_diagonal(
                    &current,
                    &task.train,
                    p.fisher_samples,
                    Rng::mix(seed, k as u64),
                )?);
            }
            StrategyConfig::Rehearsal { per_task_cap, .. } => {
                buffer = buffer_update(&buffer, &task.train, *per_task_cap)?;
            }
            _ => {}
        }
    }
    Ok(history)
}
