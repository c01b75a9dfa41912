//! Shared domain types.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// A point in physical parameter space (L96: `[F, h, c, b]`,
/// KSE: `[lambda2, lambda4, lambda_nl]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A unit-norm feature vector on the hypersphere.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

/// Tolerance on the unit-norm invariant for stored embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-6;

impl Embedding {
    /// Wrap a vector, requiring it to already have unit norm.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(CoreError::invalid(format!(
                "embedding norm {norm} is not within {UNIT_NORM_TOL} of 1"
            )));
        }
        Ok(Self(values))
    }

    /// Normalize an arbitrary nonzero vector onto the sphere.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(CoreError::invalid("cannot normalize zero or non-finite vector"));
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self(values))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}
