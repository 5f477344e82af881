//! Dense vector primitives shared by every other module.
//!
//! All similarity and softmax arithmetic runs in 64-bit floating point.
//! Tolerance constants live here so the rest of the crate agrees on them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as zero vectors (upstream corruption).
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Default tolerance for exactness assertions on normalized quantities.
pub const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector: norm below {ZERO_NORM_EPS:e}")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
}

/// A fixed-dimension real vector representing one instance at one frame.
///
/// Every embedding participating in a run shares the engine's configured
/// dimension; components are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(
            values.iter().all(|v| v.is_finite()),
            "embedding components must be finite"
        );
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64, EmbeddingError> {
        check_dims(self, other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + weight * other`, in place.
    pub fn add_scaled(&mut self, other: &Embedding, weight: f64) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += weight * b;
        }
    }

    pub fn scaled(&self, factor: f64) -> Embedding {
        Embedding::new(self.values.iter().map(|v| v * factor).collect())
    }

    /// Unit-norm copy; errors on (near-)zero vectors.
    pub fn normalized(&self) -> Result<Embedding, EmbeddingError> {
        let n = self.norm();
        if n < ZERO_NORM_EPS {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(self.scaled(1.0 / n))
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(values: Vec<f64>) -> Self {
        Embedding::new(values)
    }
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<(), EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Cosine similarity `a·b / (‖a‖‖b‖)` in `[-1, 1]`.
///
/// Zero-norm inputs are an error rather than similarity 0: they indicate
/// upstream corruption.
pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    check_dims(a, b)?;
    let na = a.norm();
    let nb = b.norm();
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return Err(EmbeddingError::ZeroVector);
    }
    let raw = a.dot(b)? / (na * nb);
    // Rounding can push |cos| marginally past 1.
    Ok(raw.clamp(-1.0, 1.0))
}

/// Numerically stable softmax: shift by the maximum before exponentiating.
///
/// Output sums to 1 and is invariant under adding a constant to all scores.
pub fn stable_softmax(scores: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    if scores.is_empty() {
        return Err(EmbeddingError::EmptyInput);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `log(Σ exp(x_i))` without overflow.
pub fn log_sum_exp(scores: &[f64]) -> Result<f64, EmbeddingError> {
    if scores.is_empty() {
        return Err(EmbeddingError::EmptyInput);
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    Ok(max + sum.ln())
}
