//! Server-side aggregation rules.
//!
//! FedAvg is weighted by client dataset size. Trimmed mean and the
//! coordinate-wise median are unweighted order statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::ParamVector;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedUpdate {
    pub update: ParamVector,
    pub weight: f64,
}

impl WeightedUpdate {
    pub fn new(update: ParamVector, weight: f64) -> Self {
        Self { update, weight }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationRule {
    Fedavg,
    TrimmedMean { trim_fraction: f64 },
    Median,
}

impl AggregationRule {
    pub fn aggregate(&self, inputs: &[WeightedUpdate]) -> Result<ParamVector> {
        match *self {
            AggregationRule::Fedavg => fedavg(inputs),
            AggregationRule::TrimmedMean { trim_fraction } => {
                let vs: Vec<&ParamVector> = inputs.iter().map(|w| &w.update).collect();
                trimmed_mean(&vs, trim_fraction)
            }
            AggregationRule::Median => {
                let vs: Vec<&ParamVector> = inputs.iter().map(|w| &w.update).collect();
                coordinate_median(&vs)
            }
        }
    }
}

fn common_len<'a>(mut vs: impl Iterator<Item = &'a ParamVector>) -> Result<usize> {
    let first = vs.next().ok_or_else(|| Error::param("aggregation over no updates"))?;
    let len = first.len();
    for v in vs {
        if v.len() != len {
            return Err(Error::Dimension {
                expected: len,
                found: v.len(),
            });
        }
    }
    Ok(len)
}

/// `sum(w_c * u_c) / sum(w_c)`.
pub fn fedavg(inputs: &[WeightedUpdate]) -> Result<ParamVector> {
    let len = common_len(inputs.iter().map(|w| &w.update))?;
    if let Some(w) = inputs.iter().find(|w| !(w.weight.is_finite() && w.weight > 0.0)) {
        return Err(Error::param(format!("aggregation weight {} must be positive", w.weight)));
    }
    let total: f64 = inputs.iter().map(|w| w.weight).sum();
    let mut acc = vec![0.0; len];
    for w in inputs {
        acc.iter_mut().zip(w.update.iter()).for_each(|(a, u)| *a += w.weight * u);
    }
    ParamVector::new(acc.into_iter().map(|a| a / total).collect())
}

fn column(inputs: &[&ParamVector], j: usize) -> Vec<f64> {
    let mut col: Vec<f64> = inputs.iter().map(|v| v[j]).collect();
    col.sort_by(f64::total_cmp);
    col
}

/// Per coordinate, drops `floor(trim_fraction * n)` values from each end and averages the rest.
pub fn trimmed_mean(inputs: &[&ParamVector], trim_fraction: f64) -> Result<ParamVector> {
    let len = common_len(inputs.iter().copied())?;
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(Error::param(format!("trim fraction {trim_fraction} outside [0, 0.5)")));
    }
    let n = inputs.len();
    let k = (trim_fraction * n as f64).floor() as usize;
    if n <= 2 * k {
        return Err(Error::param(format!("trimming {k} from each end of {n} leaves nothing")));
    }
    ParamVector::new(
        (0..len)
            .map(|j| {
                let col = column(inputs, j);
                let kept = &col[k..n - k];
                kept.iter().sum::<f64>() / kept.len() as f64
            })
            .collect(),
    )
}

/// Per-coordinate median; the lower median for even counts.
pub fn coordinate_median(inputs: &[&ParamVector]) -> Result<ParamVector> {
    let len = common_len(inputs.iter().copied())?;
    let mid = (inputs.len() - 1) / 2;
    ParamVector::new((0..len).map(|j| column(inputs, j)[mid]).collect())
}
