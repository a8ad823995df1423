//! Post-hoc checkpoint merging: weighted averaging (WiSE-FT), task
//! arithmetic, TIES, Fisher-weighted merging, and the elementwise EWC merge
//! step. Every operator here is a pure function of parameter vectors — no
//! merge ever reads data.

use crate::nnet::FisherDiagonal;
use crate::param::{check_same_len, weighted_average, ParamVector};
use crate::{Error, Result};

/// Sparsity kept by `ties_merge` when no density is configured.
pub const DEFAULT_TIES_DENSITY: f64 = 0.2;

/// A fine-tuned model expressed relative to its base: τ = θ_ft − θ_base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    delta: ParamVector,
}

impl TaskVector {
    pub fn from_delta(delta: ParamVector) -> Self {
        TaskVector { delta }
    }

    pub fn delta(&self) -> &ParamVector {
        &self.delta
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }
}

/// Per-model scaling coefficients for a merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeWeights {
    weights: Vec<f64>,
}

impl MergeWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Domain(format!(
                "merge weight {i} is not finite"
            )));
        }
        Ok(MergeWeights { weights })
    }

    /// k equal weights summing to 1.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Domain("cannot build weights for zero models".into()));
        }
        Ok(MergeWeights {
            weights: vec![1.0 / k as f64; k],
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Errors unless every weight is ≥ 0.
    pub fn ensure_nonnegative(&self, context: &str) -> Result<()> {
        if let Some(i) = self.weights.iter().position(|&w| w < 0.0) {
            return Err(Error::Domain(format!(
                "{context}: weight {i} is negative ({})",
                self.weights[i]
            )));
        }
        Ok(())
    }

    /// Errors unless the weights are a convex combination: all ≥ 0 and
    /// summing to 1 within 1e-12.
    pub fn ensure_convex(&self, context: &str) -> Result<()> {
        self.ensure_nonnegative(context)?;
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "{context}: weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// τ = finetuned − base.
pub fn task_vector(base: &ParamVector, finetuned: &ParamVector) -> Result<TaskVector> {
    check_same_len("task vector endpoints", base.len(), finetuned.len())?;
    let delta: Vec<f64> = finetuned
        .as_slice()
        .iter()
        .zip(base.as_slice())
        .map(|(f, b)| f - b)
        .collect();
    if !delta.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("task_vector"));
    }
    Ok(TaskVector::from_delta(ParamVector::from_raw(delta)))
}

fn check_vector_weights(
    context: &'static str,
    base_len: usize,
    vectors: &[TaskVector],
    weights: &MergeWeights,
) -> Result<()> {
    if vectors.len() != weights.len() {
        return Err(Error::Dimension {
            context,
            left: vectors.len(),
            right: weights.len(),
        });
    }
    for v in vectors {
        check_same_len(context, base_len, v.len())?;
    }
    Ok(())
}

/// base + Σ_i w_i·τ_i.
pub fn task_arithmetic(
    base: &ParamVector,
    vectors: &[TaskVector],
    weights: &MergeWeights,
) -> Result<ParamVector> {
    check_vector_weights("task vectors vs weights", base.len(), vectors, weights)?;
    let mut out = base.as_slice().to_vec();
    for (v, &w) in vectors.iter().zip(weights.weights()) {
        for (o, &d) in out.iter_mut().zip(v.delta().as_slice()) {
            *o += w * d;
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("task_arithmetic"));
    }
    Ok(ParamVector::from_raw(out))
}

/// Interpolate a fine-tuned model back toward its base:
/// β·base + (1−β)·finetuned. A named alias of [`weighted_average`] so merge
/// configurations can say what they mean.
pub fn wise_ft(base: &ParamVector, finetuned: &ParamVector, beta: f64) -> Result<ParamVector> {
    weighted_average(base, finetuned, beta)
}

/// Indices of the `keep` largest-magnitude entries, ties at the threshold
/// resolving to the lower index.
fn top_k_by_magnitude(values: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .abs()
            .partial_cmp(&values[a].abs())
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(keep);
    order
}

/// TIES merging: per task vector, TRIM to the top ⌈density·len⌉ entries by
/// magnitude (threshold ties keep the lower index); per coordinate, ELECT
/// the sign of the weighted trimmed sum (an exact zero elects positive);
/// then MERGE the sign-matching entries as a weighted mean over the
/// contributing vectors' weights. Coordinates with no contributor — or
/// whose contributors carry zero total weight — keep the base value.
pub fn ties_merge(
    base: &ParamVector,
    vectors: &[TaskVector],
    density: f64,
    weights: &MergeWeights,
) -> Result<ParamVector> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Domain(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    if vectors.is_empty() {
        return Err(Error::Domain("ties_merge needs at least one task vector".into()));
    }
    check_vector_weights("task vectors vs weights", base.len(), vectors, weights)?;
    weights.ensure_nonnegative("ties_merge")?;

    let n = base.len();
    let keep = ((density * n as f64).ceil() as usize).min(n);
    let trimmed: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            let d = v.delta().as_slice();
            let mut t = vec![0.0; n];
            for idx in top_k_by_magnitude(d, keep) {
                t[idx] = d[idx];
            }
            t
        })
        .collect();

    let mut out = base.as_slice().to_vec();
    for j in 0..n {
        let vote: f64 = trimmed
            .iter()
            .zip(weights.weights())
            .map(|(t, &w)| w * t[j])
            .sum();
        let elected_positive = vote >= 0.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for (t, &w) in trimmed.iter().zip(weights.weights()) {
            let e = t[j];
            if e != 0.0 && (e > 0.0) == elected_positive {
                num += w * e;
                den += w;
            }
        }
        if den > 0.0 {
            out[j] += num / den;
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("ties_merge"));
    }
    Ok(ParamVector::from_raw(out))
}

/// Fisher-weighted merging: per coordinate j,
/// θ*(j) = Σ_k λ_k·F_k(j)·θ_k(j) / Σ_k λ_k·F_k(j). Coordinates where every
/// λ_k·F_k(j) vanishes fall back to the unweighted mean of the models.
pub fn fisher_merge(
    models: &[ParamVector],
    fishers: &[FisherDiagonal],
    lambdas: &MergeWeights,
) -> Result<ParamVector> {
    if models.is_empty() {
        return Err(Error::Domain("fisher_merge needs at least one model".into()));
    }
    if models.len() != fishers.len() || models.len() != lambdas.len() {
        return Err(Error::Dimension {
            context: "models vs fishers vs lambdas",
            left: models.len(),
            right: fishers.len().min(lambdas.len()),
        });
    }
    lambdas.ensure_nonnegative("fisher_merge")?;
    let n = models[0].len();
    for m in models {
        check_same_len("fisher_merge model lengths", n, m.len())?;
    }
    for f in fishers {
        check_same_len("fisher_merge fisher lengths", n, f.len())?;
    }

    let k = models.len() as f64;
    let mut out = vec![0.0; n];
    for (j, slot) in out.iter_mut().enumerate() {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((m, f), &l) in models.iter().zip(fishers).zip(lambdas.weights()) {
            let lf = l * f.as_slice()[j];
            num += lf * m.as_slice()[j];
            den += lf;
        }
        *slot = if den > 0.0 {
            num / den
        } else {
            models.iter().map(|m| m.as_slice()[j]).sum::<f64>() / k
        };
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("fisher_merge"));
    }
    Ok(ParamVector::from_raw(out))
}

/// The elementwise EWC merge step:
/// θ(j) = (1 − η·F_o(j))·θ*(j) + η·F_o(j)·θ_o(j).
///
/// Requires η ≥ 0 and η·F_o(j) ≤ 1 everywhere — beyond that the map stops
/// contracting toward the anchor and the two-step EWC decomposition
/// diverges.
pub fn ewc_merge_step(
    theta_star: &ParamVector,
    theta_o: &ParamVector,
    fisher_o: &FisherDiagonal,
    eta: f64,
) -> Result<ParamVector> {
    check_same_len("merge step endpoints", theta_star.len(), theta_o.len())?;
    check_same_len("merge step fisher length", theta_star.len(), fisher_o.len())?;
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::Domain(format!(
            "eta must be finite and non-negative, got {eta}"
        )));
    }
    if let Some(j) = fisher_o.as_slice().iter().position(|&f| eta * f > 1.0) {
        return Err(Error::Domain(format!(
            "eta * fisher = {} > 1 at coordinate {j}; use a smaller eta",
            eta * fisher_o.as_slice()[j]
        )));
    }
    let out: Vec<f64> = theta_star
        .as_slice()
        .iter()
        .zip(theta_o.as_slice())
        .zip(fisher_o.as_slice())
        .map(|((s, o), &f)| {
            let m = eta * f;
            (1.0 - m) * s + m * o
        })
        .collect();
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("ewc_merge_step"));
    }
    Ok(ParamVector::from_raw(out))
}
