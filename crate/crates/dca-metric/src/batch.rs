use ndarray::Array2;

use crate::error::{DcaError, Result};

/// A batch of embedded samples: one feature row per sample plus an identity
/// label for each row.
///
/// Construction validates the invariants every downstream operation relies
/// on (finite features, matching label count, at least two rows), so holding
/// an `EmbeddingBatch` is proof the data is usable.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    features: Array2<f64>,
    labels: Vec<u32>,
}

impl EmbeddingBatch {
    /// Wraps a feature matrix and its identity labels after validation.
    ///
    /// Requires at least two rows, at least one feature column, exactly one
    /// label per row, and fully finite features. A NaN or infinity is
    /// rejected with the index of the offending row.
    pub fn new(features: Array2<f64>, labels: Vec<u32>) -> Result<Self> {
        if features.nrows() < 2 {
            return Err(DcaError::invalid(format!(
                "batch needs at least 2 rows, got {}",
                features.nrows()
            )));
        }
        if features.ncols() == 0 {
            return Err(DcaError::invalid("batch needs at least 1 feature column"));
        }
        if labels.len() != features.nrows() {
            return Err(DcaError::invalid(format!(
                "label count {} does not match row count {}",
                labels.len(),
                features.nrows()
            )));
        }
        for (row, values) in features.rows().into_iter().enumerate() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(DcaError::NonFinite { row });
            }
        }
        Ok(Self { features, labels })
    }

    /// Number of samples in the batch.
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    /// True when the batch has no rows (unreachable for validated batches;
    /// provided for API completeness).
    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Feature dimensionality.
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// In-crate mutable access used by the finite-difference checker, which
    /// perturbs one coordinate at a time and keeps values finite.
    pub(crate) fn features_mut(&mut self) -> &mut Array2<f64> {
        &mut self.features
    }
}
