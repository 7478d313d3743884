//! Central finite-difference gradient checking.
//!
//! Errors are reported per parameter array as a normwise relative error,
//! `max |a - n| / max(max |a|, max |n|, 1e-6)`. The floor keeps arrays whose
//! true gradient is identically zero (key biases, for instance: softmax is
//! shift invariant) from turning finite-difference round-off into large
//! relative errors.

use serde::Serialize;

use super::Model;
use crate::error::Result;
use crate::training::objective::{evaluate, Objective};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Central differences of `f` at `x`.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let up = f(&probe);
            probe[i] = x[i] - eps;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(GRADIENT_FLOOR, f64::max);
    diff / scale
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupError {
    pub name: String,
    pub len: usize,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }
}

/// Compares the analytic gradient of `objective` against central
/// differences for every parameter of `model`, without dropout.
pub fn check_model(model: &Model<f64>, objective: &Objective, eps: f64) -> Result<GradCheckReport> {
    let out = evaluate(model, objective, None, true)?;
    let analytic = out.grads.expect("gradient requested");
    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(model.layout.entries.len());
    for entry in &model.layout.entries {
        let mut numeric = Vec::with_capacity(entry.len);
        for i in entry.offset..entry.offset + entry.len {
            let x = model.data[i];
            probe.data[i] = x + eps;
            let up = evaluate(&probe, objective, None, false)?.loss;
            probe.data[i] = x - eps;
            let down = evaluate(&probe, objective, None, false)?.loss;
            probe.data[i] = x;
            numeric.push((up - down) / (2.0 * eps));
        }
        groups.push(GroupError {
            name: entry.name.clone(),
            len: entry.len,
            relative_error: relative_error(&analytic[entry.offset..entry.offset + entry.len], &numeric),
        });
    }
    Ok(GradCheckReport {
        loss: out.loss,
        groups,
    })
}
