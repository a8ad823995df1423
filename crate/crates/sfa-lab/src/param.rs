//! Flat parameter vectors and the element-wise algebra every merge rule and
//! trainer builds on.

use crate::{Error, Result};

/// Fixed-length vector of f64 model parameters.
///
/// Entries are finite by construction; any operation that would produce a
/// NaN or infinity reports an error instead of propagating it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite parameter at index {i}"
            )));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

pub(crate) fn check_same_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            left: a,
            right: b,
        })
    }
}

/// Element-wise a·x + b·y.
pub fn linear_combine(a: f64, x: &ParamVector, b: f64, y: &ParamVector) -> Result<ParamVector> {
    check_same_len("linear_combine", x.len(), y.len())?;
    let values: Vec<f64> = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&xi, &yi)| a * xi + b * yi)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear_combine"));
    }
    Ok(ParamVector(values))
}

/// β·θ_o + (1−β)·θ\* — the merge applied at every averaging event.
pub fn weighted_average(theta_o: &ParamVector, theta_star: &ParamVector, beta: f64) -> Result<ParamVector> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta must lie in [0, 1], got {beta}")));
    }
    linear_combine(beta, theta_o, 1.0 - beta, theta_star)
}

/// Euclidean distance ‖x − y‖₂.
pub fn l2_distance(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    check_same_len("l2_distance", x.len(), y.len())?;
    let sum: f64 = x
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&xi, &yi)| {
            let d = xi - yi;
            d * d
        })
        .sum();
    let dist = sum.sqrt();
    if !dist.is_finite() {
        return Err(Error::NonFinite("l2_distance"));
    }
    Ok(dist)
}
