//! Dense parameter vectors and the similarity primitives built on them.
//!
//! Every model, gradient and client update in the simulator is a flat
//! [`ParamVector`]. Entries are always finite; constructors reject NaN/Inf
//! and binary operations require equal lengths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat vector of model parameters or gradient entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps `values`, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry {} at index {i}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
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

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        dot(self, other)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(self)
    }

    /// `self * k`.
    pub fn scaled(&self, k: f64) -> Result<ParamVector> {
        ParamVector::new(self.0.iter().map(|v| v * k).collect())
    }

    /// `self + k * other`.
    pub fn add_scaled(&self, k: f64, other: &ParamVector) -> Result<ParamVector> {
        check_len(self, other)?;
        ParamVector::new(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + k * b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.add_scaled(-1.0, other)
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        self.add_scaled(1.0, other)
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_len(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_len(a, b)?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum())
}

pub fn l2_norm(a: &ParamVector) -> f64 {
    a.0.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// Fails with [`Error::DegenerateVector`] if either input has zero norm.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    let ab = dot(a, b)?;
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector("cosine similarity of a zero-norm vector"));
    }
    Ok((ab / (na * nb)).clamp(-1.0, 1.0))
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}
