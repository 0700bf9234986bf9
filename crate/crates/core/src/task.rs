//! Linear teachers.

use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("teacher vector is empty")]
    Empty,
    #[error("teacher vector contains a non-finite entry")]
    NonFinite,
    #[error("teacher dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
}

/// Parameter vector of a linear teacher `y = <theta, x>`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector(DVector<f64>);

impl TaskVector {
    pub fn new(v: DVector<f64>) -> Result<Self, TaskError> {
        if v.is_empty() {
            return Err(TaskError::Empty);
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(TaskError::NonFinite);
        }
        Ok(Self(v))
    }

    pub fn from_slice(v: &[f64]) -> Result<Self, TaskError> {
        Self::new(DVector::from_column_slice(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(&self.0 * factor)
    }

    /// Euclidean distance between two teachers.
    pub fn distance(&self, other: &TaskVector) -> Result<f64, TaskError> {
        self.check_same_dim(other)?;
        Ok((&self.0 - &other.0).norm())
    }

    pub fn check_same_dim(&self, other: &TaskVector) -> Result<(), TaskError> {
        if self.dim() != other.dim() {
            return Err(TaskError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(())
    }
}
