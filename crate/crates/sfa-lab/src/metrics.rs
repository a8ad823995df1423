//! Scorekeeping for continual-learning runs: accuracy histories indexed by
//! (global step, training task, evaluation task), per-boundary checkpoints,
//! final average accuracy, and forgetting.

use crate::param::ParamVector;
use crate::{Error, Result};

/// One accuracy measurement.
///
/// `accuracy` restricts predictions to the evaluation task's own classes;
/// `global_accuracy` lets the model pick over the full class space. The
/// masked number is the primary metric — the global one is kept for
/// diagnosing cross-task interference.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub global_step: usize,
    /// Task being trained when the measurement was taken.
    pub train_task: usize,
    pub eval_task: usize,
    pub accuracy: f64,
    pub global_accuracy: f64,
}

/// End-of-task snapshot.
#[derive(Debug, Clone)]
pub struct Boundary {
    pub global_step: usize,
    /// How many tasks have finished training at this point.
    pub trained_tasks: usize,
    pub params: ParamVector,
}

/// Everything a run produces: the evaluation trace, per-boundary
/// checkpoints, the initial parameters, and an echo of the resolved
/// configuration the run was launched with.
#[derive(Debug, Clone)]
pub struct RunHistory {
    num_tasks: usize,
    records: Vec<EvalRecord>,
    boundaries: Vec<Boundary>,
    initial_params: ParamVector,
    config_echo: String,
}

impl RunHistory {
    pub fn new(num_tasks: usize, initial_params: ParamVector, config_echo: String) -> Result<Self> {
        if num_tasks == 0 {
            return Err(Error::Domain("a run history needs at least one task".into()));
        }
        Ok(RunHistory {
            num_tasks,
            records: Vec::new(),
            boundaries: Vec::new(),
            initial_params,
            config_echo,
        })
    }

    /// Append a measurement; records must arrive in non-decreasing
    /// global-step order with accuracies in [0, 1].
    pub fn push_record(&mut self, record: EvalRecord) -> Result<()> {
        for (name, v) in [
            ("accuracy", record.accuracy),
            ("global_accuracy", record.global_accuracy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!(
                    "{name} {v} outside [0, 1] at step {}",
                    record.global_step
                )));
            }
        }
        if record.eval_task >= self.num_tasks || record.train_task >= self.num_tasks {
            return Err(Error::Domain(format!(
                "record names task outside the {}-task run",
                self.num_tasks
            )));
        }
        if let Some(last) = self.records.last() {
            if record.global_step < last.global_step {
                return Err(Error::Domain(format!(
                    "record at step {} arrived after step {}",
                    record.global_step, last.global_step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_boundary(&mut self, boundary: Boundary) -> Result<()> {
        if let Some(last) = self.boundaries.last() {
            if boundary.global_step <= last.global_step
                || boundary.trained_tasks <= last.trained_tasks
            {
                return Err(Error::Domain(
                    "boundaries must advance in step and task count".into(),
                ));
            }
        }
        if boundary.trained_tasks > self.num_tasks {
            return Err(Error::Domain(format!(
                "boundary claims {} trained tasks of {}",
                boundary.trained_tasks, self.num_tasks
            )));
        }
        self.boundaries.push(boundary);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn records(&self) -> &[EvalRecord] {
        &self.records
    }

    pub fn boundaries(&self) -> &[Boundary] {
        &self.boundaries
    }

    pub fn initial_params(&self) -> &ParamVector {
        &self.initial_params
    }

    pub fn config_echo(&self) -> &str {
        &self.config_echo
    }

    /// Parameters at the last boundary — the run's outcome.
    pub fn final_params(&self) -> Result<&ParamVector> {
        self.boundaries
            .last()
            .map(|b| &b.params)
            .ok_or_else(|| Error::Domain("run recorded no task boundary".into()))
    }

    /// Last recorded accuracy for one evaluation task.
    fn last_accuracy(&self, eval_task: usize) -> Result<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.eval_task == eval_task)
            .map(|r| r.accuracy)
            .ok_or_else(|| {
                Error::Domain(format!("history holds no record for task {eval_task}"))
            })
    }
}

/// Mean over tasks of each task's last recorded accuracy.
pub fn final_average_accuracy(history: &RunHistory) -> Result<f64> {
    let mut sum = 0.0;
    for j in 0..history.num_tasks() {
        sum += history.last_accuracy(j)?;
    }
    Ok(sum / history.num_tasks() as f64)
}

/// Accuracy drop on `eval_task` between its own end-of-training boundary
/// and the end of the run. Negative values mean later training helped.
pub fn forgetting(history: &RunHistory, eval_task: usize) -> Result<f64> {
    if eval_task >= history.num_tasks() {
        return Err(Error::Domain(format!(
            "task {eval_task} outside the {}-task run",
            history.num_tasks()
        )));
    }
    let boundary = history
        .boundaries()
        .iter()
        .find(|b| b.trained_tasks > eval_task)
        .ok_or_else(|| Error::Domain(format!("task {eval_task} was never trained")))?;
    let at_boundary = history
        .records()
        .iter()
        .find(|r| r.global_step == boundary.global_step && r.eval_task == eval_task)
        .map(|r| r.accuracy)
        .ok_or_else(|| {
            Error::Domain(format!(
                "no record for task {eval_task} at its boundary step {}",
                boundary.global_step
            ))
        })?;
    Ok(at_boundary - history.last_accuracy(eval_task)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn record(step: usize, train: usize, eval: usize, acc: f64) -> EvalRecord {
        EvalRecord {
            global_step: step,
            train_task: train,
            eval_task: eval,
            accuracy: acc,
            global_accuracy: acc,
        }
    }

    fn history(num_tasks: usize) -> RunHistory {
        RunHistory::new(num_tasks, ParamVector::zeros(3), String::new()).unwrap()
    }

    fn boundary(step: usize, trained: usize) -> Boundary {
        Boundary {
            global_step: step,
            trained_tasks: trained,
            params: ParamVector::zeros(3),
        }
    }

    #[test]
    fn final_average_over_two_tasks() {
        let mut h = history(2);
        h.push_record(record(10, 0, 0, 0.9)).unwrap();
        h.push_record(record(10, 0, 1, 0.1)).unwrap();
        h.push_record(record(20, 1, 0, 0.2)).unwrap();
        h.push_record(record(20, 1, 1, 0.8)).unwrap();
        assert!((final_average_accuracy(&h).unwrap() - 0.5).abs() < 1e-15);

        let mut perfect = history(2);
        perfect.push_record(record(5, 0, 0, 1.0)).unwrap();
        perfect.push_record(record(5, 0, 1, 1.0)).unwrap();
        assert_eq!(final_average_accuracy(&perfect).unwrap(), 1.0);
    }

    #[test]
    fn final_average_needs_every_task() {
        let mut h = history(3);
        h.push_record(record(10, 0, 0, 0.5)).unwrap();
        h.push_record(record(10, 0, 1, 0.5)).unwrap();
        assert!(final_average_accuracy(&h).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn final_average_matches_brute_force_over_many_tasks() {
        let mut h = history(20);
        let mut rng = Rng::new(2024);
        let mut finals = [0.0; 20];
        for step in 1..=40 {
            for task in 0..20 {
                let acc = rng.next_f64();
                h.push_record(record(step * 100, step % 20, task, acc)).unwrap();
                finals[task] = acc;
            }
        }
        let want = finals.iter().sum::<f64>() / 20.0;
        assert!((final_average_accuracy(&h).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn final_average_is_permutation_invariant() {
        let mut a = history(3);
        let mut b = history(3);
        let accs = [0.3, 0.6, 0.9];
        for (j, &acc) in accs.iter().enumerate() {
            a.push_record(record(10, 0, j, acc)).unwrap();
            // same accuracies assigned to relabeled tasks
            b.push_record(record(10, 0, 2 - j, acc)).unwrap();
        }
        assert!(
            (final_average_accuracy(&a).unwrap() - final_average_accuracy(&b).unwrap()).abs()
                < 1e-15
        );
    }

    #[test]
    fn forgetting_is_boundary_minus_final() {
        let mut h = history(2);
        h.push_record(record(100, 0, 0, 0.95)).unwrap();
        h.push_record(record(100, 0, 1, 0.05)).unwrap();
        h.push_boundary(boundary(100, 1)).unwrap();
        h.push_record(record(200, 1, 0, 0.15)).unwrap();
        h.push_record(record(200, 1, 1, 0.85)).unwrap();
        h.push_boundary(boundary(200, 2)).unwrap();
        assert!((forgetting(&h, 0).unwrap() - 0.80).abs() < 1e-15);
        // task 1's boundary is the end of the run → zero by construction
        assert_eq!(forgetting(&h, 1).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_single_task_run_is_zero() {
        let mut h = history(1);
        h.push_record(record(50, 0, 0, 0.7)).unwrap();
        h.push_boundary(boundary(50, 1)).unwrap();
        assert_eq!(forgetting(&h, 0).unwrap(), 0.0);
    }

    #[test]
    fn forgetting_can_be_negative_when_later_training_helps() {
        let mut h = history(2);
        h.push_record(record(100, 0, 0, 0.6)).unwrap();
        h.push_record(record(100, 0, 1, 0.1)).unwrap();
        h.push_boundary(boundary(100, 1)).unwrap();
        h.push_record(record(200, 1, 0, 0.75)).unwrap();
        h.push_record(record(200, 1, 1, 0.9)).unwrap();
        h.push_boundary(boundary(200, 2)).unwrap();
        assert!((forgetting(&h, 0).unwrap() + 0.15).abs() < 1e-15);
    }

    #[test]
    fn forgetting_rejects_untrained_tasks() {
        let mut h = history(2);
        h.push_record(record(100, 0, 0, 0.9)).unwrap();
        h.push_record(record(100, 0, 1, 0.2)).unwrap();
        h.push_boundary(boundary(100, 1)).unwrap();
        assert!(forgetting(&h, 1).is_err());
        assert!(forgetting(&h, 5).is_err());
    }

    #[test]
    fn pushes_validate_ordering_and_ranges() {
        let mut h = history(2);
        assert!(h.push_record(record(10, 0, 0, 1.5)).is_err());
        assert!(h.push_record(record(10, 0, 7, 0.5)).is_err());
        h.push_record(record(10, 0, 0, 0.5)).unwrap();
        assert!(h.push_record(record(5, 0, 0, 0.5)).is_err());
        h.push_boundary(boundary(10, 1)).unwrap();
        assert!(h.push_boundary(boundary(10, 2)).is_err());
        assert!(h.push_boundary(boundary(20, 1)).is_err());
        assert!(h.push_boundary(boundary(20, 9)).is_err());
        assert!(h.final_params().is_ok());
        assert!(history(1).final_params().is_err());
    }
}
