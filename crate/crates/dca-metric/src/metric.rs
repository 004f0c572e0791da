//! Distance and similarity matrices over an embedding batch.
//!
//! The computation chain is: Euclidean distances `d`, a Gaussian similarity
//! kernel `v = exp(-d)`, a soft Jaccard distance `j` over similarity rows
//! (how differently two samples relate to the rest of the batch), and the
//! blended distance
//!
//! ```text
//! d_blend = (1 - lambda) * d  +  lambda * j  +  j * d
//! ```
//!
//! which the context-aware losses mine and rank with. [`DcaDistances`]
//! carries every intermediate matrix so the backward pass never recomputes
//! them.

use ndarray::{Array2, ArrayView1};

use crate::batch::EmbeddingBatch;
use crate::error::{DcaError, Result};
use crate::numeric::exact_sum;

/// Exponent clamp for the similarity kernel: `v = exp(-min(d, 80))`.
/// `exp(-80)` is ~1.8e-35, far below every tolerance in play, and the clamp
/// keeps the kernel away from subnormal territory for extreme inputs.
pub const SIM_EXPONENT_CLAMP: f64 = 80.0;

/// Floor applied to the soft Jaccard denominator. Each row's self-similarity
/// term is exactly 1, so real denominators are always >= 1 and the floor is
/// unreachable; it exists purely as a division-by-zero guard.
pub const JACCARD_DENOM_FLOOR: f64 = 1e-12;

/// Pairwise Euclidean distances between the rows of a batch.
///
/// Uses the Gram-matrix identity `|xi - xj|^2 = <xi,xi> + <xj,xj> - 2<xi,xj>`
/// with the squared norms taken from the same dot-product routine, so two
/// bitwise-identical rows produce a distance of exactly zero. Squared
/// distances are clamped at zero before the square root to absorb negative
/// rounding residue. The result is exactly symmetric with a zero diagonal.
pub fn pairwise_distances(batch: &EmbeddingBatch) -> Array2<f64> {
    let x = batch.features();
    let n = x.nrows();
    let norms: Vec<f64> = (0..n).map(|i| dot(x.row(i), x.row(i))).collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let sq = norms[i] + norms[j] - 2.0 * dot(x.row(i), x.row(j));
            let d = sq.max(0.0).sqrt();
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    out
}

/// Euclidean distances from each row of `a` to each row of `b` (an
/// `a.len() x b.len()` matrix). Errors if the feature dimensions differ.
pub fn cross_distances(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(DcaError::invalid(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let xa = a.features();
    let xb = b.features();
    let norms_a: Vec<f64> = (0..xa.nrows()).map(|i| dot(xa.row(i), xa.row(i))).collect();
    let norms_b: Vec<f64> = (0..xb.nrows()).map(|j| dot(xb.row(j), xb.row(j))).collect();
    let mut out = Array2::zeros((xa.nrows(), xb.nrows()));
    for i in 0..xa.nrows() {
        for j in 0..xb.nrows() {
            let sq = norms_a[i] + norms_b[j] - 2.0 * dot(xa.row(i), xb.row(j));
            out[[i, j]] = sq.max(0.0).sqrt();
        }
    }
    Ok(out)
}

fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Gaussian similarity kernel `v_ij = exp(-min(d_ij, 80))` applied entrywise
/// to a distance matrix. The diagonal comes out exactly 1.
///
/// The input must be square and symmetric with a zero diagonal and finite,
/// non-negative entries; anything else is rejected.
pub fn gaussian_similarity(dist: &Array2<f64>) -> Result<Array2<f64>> {
    validate_distance_matrix(dist)?;
    let mut out = Array2::zeros(dist.raw_dim());
    for ((i, j), &d) in dist.indexed_iter() {
        out[[i, j]] = (-d.min(SIM_EXPONENT_CLAMP)).exp();
    }
    Ok(out)
}

/// Soft Jaccard distance between similarity rows:
///
/// ```text
/// j_ij = 1 - sum_k min(v_ik, v_jk) / sum_k max(v_ik, v_jk)
/// ```
///
/// with `k` running over every batch member, self-terms included. Both sums
/// are accumulated exactly, so the matrix is invariant under a permutation
/// of the batch. Entries lie in `[0, 1]`, the diagonal is exactly zero, and
/// the matrix is exactly symmetric.
///
/// The input must be a square similarity matrix of at least two rows with a
/// unit diagonal and finite entries in `(0, 1]`.
pub fn jaccard_distances(sim: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(jaccard_with_sums(sim)?.0)
}

/// As [`jaccard_distances`], additionally returning the per-pair min-sums and
/// max-sums the backward pass differentiates through.
fn jaccard_with_sums(sim: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    validate_similarity_matrix(sim)?;
    let n = sim.nrows();
    let mut jac = Array2::zeros((n, n));
    let mut min_sums = Array2::zeros((n, n));
    let mut max_sums = Array2::zeros((n, n));
    let mut mins = vec![0.0; n];
    let mut maxes = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            for k in 0..n {
                let a = sim[[i, k]];
                let b = sim[[j, k]];
                mins[k] = a.min(b);
                maxes[k] = a.max(b);
            }
            let s = exact_sum(mins.iter().copied());
            let t = exact_sum(maxes.iter().copied());
            let j_val = 1.0 - s / t.max(JACCARD_DENOM_FLOOR);
            jac[[i, j]] = j_val;
            jac[[j, i]] = j_val;
            min_sums[[i, j]] = s;
            min_sums[[j, i]] = s;
            max_sums[[i, j]] = t;
            max_sums[[j, i]] = t;
        }
    }
    Ok((jac, min_sums, max_sums))
}

/// All distance matrices derived from one batch at one blend weight,
/// computed in a single pass and cached together.
#[derive(Debug, Clone)]
pub struct DcaDistances {
    dist: Array2<f64>,
    sim: Array2<f64>,
    jaccard: Array2<f64>,
    weighted: Array2<f64>,
    dca: Array2<f64>,
    min_sums: Array2<f64>,
    max_sums: Array2<f64>,
    lambda: f64,
}

impl DcaDistances {
    /// Pairwise Euclidean distances.
    pub fn dist(&self) -> &Array2<f64> {
        &self.dist
    }

    /// Gaussian similarity kernel over [`Self::dist`].
    pub fn similarity(&self) -> &Array2<f64> {
        &self.sim
    }

    /// Soft Jaccard context distance.
    pub fn jaccard(&self) -> &Array2<f64> {
        &self.jaccard
    }

    /// Elementwise product of the Jaccard and Euclidean matrices.
    pub fn weighted(&self) -> &Array2<f64> {
        &self.weighted
    }

    /// The blended distance `(1 - lambda) * d + lambda * j + j * d`.
    pub fn dca(&self) -> &Array2<f64> {
        &self.dca
    }

    /// Blend weight used to build [`Self::dca`].
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Per-pair numerator sums of the Jaccard ratio (backward pass input).
    pub(crate) fn min_sums(&self) -> &Array2<f64> {
        &self.min_sums
    }

    /// Per-pair denominator sums of the Jaccard ratio (backward pass input).
    pub(crate) fn max_sums(&self) -> &Array2<f64> {
        &self.max_sums
    }
}

/// Computes every matrix in the blended-distance chain for one batch.
///
/// `lambda` must be a finite value in `[0, 1]`; 0 leaves only the Euclidean
/// and context-weighted terms, 1 drops the plain Euclidean term.
pub fn dca_distances(batch: &EmbeddingBatch, lambda: f64) -> Result<DcaDistances> {
    validate_lambda(lambda)?;
    let dist = pairwise_distances(batch);
    let sim = gaussian_similarity(&dist)?;
    let (jaccard, min_sums, max_sums) = jaccard_with_sums(&sim)?;
    let (weighted, dca) = blend_matrices(&dist, &jaccard, lambda);
    Ok(DcaDistances {
        dist,
        sim,
        jaccard,
        weighted,
        dca,
        min_sums,
        max_sums,
        lambda,
    })
}

/// Combines a Euclidean and a Jaccard matrix into the weighted and blended
/// matrices. Shared by [`dca_distances`] and the frozen-context loss path so
/// both produce bit-identical values.
pub(crate) fn blend_matrices(
    dist: &Array2<f64>,
    jaccard: &Array2<f64>,
    lambda: f64,
) -> (Array2<f64>, Array2<f64>) {
    let n = dist.nrows();
    let mut weighted = Array2::zeros((n, n));
    let mut dca = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = dist[[i, j]];
            let jc = jaccard[[i, j]];
            let w = jc * d;
            let blended = (1.0 - lambda) * d + lambda * jc + w;
            weighted[[i, j]] = w;
            weighted[[j, i]] = w;
            dca[[i, j]] = blended;
            dca[[j, i]] = blended;
        }
    }
    (weighted, dca)
}

pub(crate) fn validate_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || !(0.0..=1.0).contains(&lambda) {
        return Err(DcaError::invalid(format!(
            "lambda must lie in [0, 1], got {lambda}"
        )));
    }
    Ok(())
}

fn validate_distance_matrix(dist: &Array2<f64>) -> Result<()> {
    if dist.nrows() != dist.ncols() {
        return Err(DcaError::invalid(format!(
            "distance matrix must be square, got {}x{}",
            dist.nrows(),
            dist.ncols()
        )));
    }
    for ((i, j), &d) in dist.indexed_iter() {
        if !d.is_finite() || d < 0.0 {
            return Err(DcaError::invalid(format!(
                "distance entry ({i}, {j}) = {d} is not a finite non-negative value"
            )));
        }
        if i == j && d != 0.0 {
            return Err(DcaError::invalid(format!(
                "distance diagonal entry ({i}, {i}) = {d} must be zero"
            )));
        }
        if dist[[j, i]] != d {
            return Err(DcaError::invalid(format!(
                "distance matrix is not symmetric at ({i}, {j})"
            )));
        }
    }
    Ok(())
}

fn validate_similarity_matrix(sim: &Array2<f64>) -> Result<()> {
    if sim.nrows() != sim.ncols() {
        return Err(DcaError::invalid(format!(
            "similarity matrix must be square, got {}x{}",
            sim.nrows(),
            sim.ncols()
        )));
    }
    if sim.nrows() < 2 {
        return Err(DcaError::invalid(
            "similarity matrix needs at least 2 rows for context distances",
        ));
    }
    for ((i, j), &v) in sim.indexed_iter() {
        if !v.is_finite() || v <= 0.0 || v > 1.0 {
            return Err(DcaError::invalid(format!(
                "similarity entry ({i}, {j}) = {v} lies outside (0, 1]"
            )));
        }
        if i == j && v != 1.0 {
            return Err(DcaError::invalid(format!(
                "similarity diagonal entry ({i}, {i}) = {v} must be exactly 1"
            )));
        }
        if sim[[j, i]] != v {
            return Err(DcaError::invalid(format!(
                "similarity matrix is not symmetric at ({i}, {j})"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn batch(features: Array2<f64>) -> EmbeddingBatch {
        let labels = (0..features.nrows() as u32).collect();
        EmbeddingBatch::new(features, labels).unwrap()
    }

    #[test]
    fn identical_rows_are_at_distance_exactly_zero() {
        let b = batch(array![[0.3, -1.7, 2.2], [0.3, -1.7, 2.2]]);
        let d = pairwise_distances(&b);
        assert_eq!(d[[0, 1]], 0.0);
        assert_eq!(d[[1, 0]], 0.0);
    }

    #[test]
    fn recovers_the_three_four_five_triangle() {
        let b = batch(array![[0.0, 0.0], [3.0, 0.0], [0.0, 4.0]]);
        let d = pairwise_distances(&b);
        assert_eq!(d[[0, 1]], 3.0);
        assert_eq!(d[[0, 2]], 4.0);
        assert_eq!(d[[1, 2]], 5.0);
    }

    #[test]
    fn distance_matrix_is_symmetric_with_zero_diagonal() {
        let b = batch(array![
            [0.11, -0.5, 3.0],
            [1.4, 2.2, -0.7],
            [-2.0, 0.0, 0.25],
            [0.6, 0.6, 0.6]
        ]);
        let d = pairwise_distances(&b);
        for i in 0..4 {
            assert_eq!(d[[i, i]], 0.0);
            for j in 0..4 {
                assert_eq!(d[[i, j]], d[[j, i]]);
            }
        }
    }

    #[test]
    fn similarity_matches_frozen_kernel_values() {
        let d = array![[0.0, 5.0], [5.0, 0.0]];
        let v = gaussian_similarity(&d).unwrap();
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[1, 1]], 1.0);
        assert!((v[[0, 1]] - 0.006737946999085467).abs() < 1e-18);

        let d1 = array![[0.0, 1.0], [1.0, 0.0]];
        let v1 = gaussian_similarity(&d1).unwrap();
        assert!((v1[[0, 1]] - 0.36787944117144233).abs() < 1e-17);
    }

    #[test]
    fn similarity_clamps_extreme_distances() {
        let d = array![[0.0, 500.0], [500.0, 0.0]];
        let v = gaussian_similarity(&d).unwrap();
        assert_eq!(v[[0, 1]], (-80.0_f64).exp());
        assert!(v[[0, 1]] > 0.0);
    }

    #[test]
    fn similarity_rejects_malformed_matrices() {
        assert!(gaussian_similarity(&Array2::zeros((2, 3))).is_err());
        assert!(gaussian_similarity(&array![[0.5, 1.0], [1.0, 0.0]]).is_err());
        assert!(gaussian_similarity(&array![[0.0, -1.0], [-1.0, 0.0]]).is_err());
        assert!(gaussian_similarity(&array![[0.0, 1.0], [2.0, 0.0]]).is_err());
    }

    #[test]
    fn two_point_jaccard_matches_the_closed_form() {
        // Unit distance: v = [[1, e^-1], [e^-1, 1]], so the min-sum is
        // 2e^-1, the max-sum is 2, and j = 1 - e^-1.
        let b = batch(array![[0.0], [1.0]]);
        let d = pairwise_distances(&b);
        let v = gaussian_similarity(&d).unwrap();
        let j = jaccard_distances(&v).unwrap();
        assert!((j[[0, 1]] - 0.6321205588285577).abs() < 1e-15);
        assert_eq!(j[[0, 0]], 0.0);
        assert_eq!(j[[1, 1]], 0.0);
        assert_eq!(j[[0, 1]], j[[1, 0]]);
    }

    #[test]
    fn coincident_points_have_zero_context_distance() {
        let b = batch(array![[1.5, -0.5], [1.5, -0.5], [1.5, -0.5]]);
        let bundle = dca_distances(&b, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(bundle.jaccard()[[i, j]], 0.0);
                assert_eq!(bundle.dca()[[i, j]], 0.0);
            }
        }
    }

    #[test]
    fn blended_distance_matches_the_closed_form_at_half_lambda() {
        // For two unit-separated points: d = 1, j = 1 - e^-1, so
        // blend = 0.5 + 0.5*j + j = 0.5 + 1.5*(1 - e^-1) = 2 - 1.5*e^-1.
        let b = batch(array![[0.0], [1.0]]);
        let bundle = dca_distances(&b, 0.5).unwrap();
        assert!((bundle.dca()[[0, 1]] - 1.4481808382428365).abs() < 1e-15);
        assert!((bundle.weighted()[[0, 1]] - 0.6321205588285577).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_on_coincident_pair_reduces_to_euclidean() {
        let b = batch(array![[2.0, 2.0], [2.0, 2.0], [5.0, 6.0]]);
        let bundle = dca_distances(&b, 0.0).unwrap();
        // The coincident pair has j = 0, so every extra term vanishes.
        assert_eq!(bundle.dca()[[0, 1]], bundle.dist()[[0, 1]]);
        assert_eq!(bundle.dca()[[0, 1]], 0.0);
    }

    #[test]
    fn jaccard_entries_stay_inside_the_unit_interval() {
        let b = batch(array![
            [0.0, 0.0],
            [0.1, -0.2],
            [3.0, 1.0],
            [-1.0, 2.5],
            [0.7, 0.7]
        ]);
        let bundle = dca_distances(&b, 0.5).unwrap();
        for ((i, j), &v) in bundle.jaccard().indexed_iter() {
            assert!((0.0..=1.0).contains(&v), "j[{i}][{j}] = {v}");
        }
    }

    #[test]
    fn rejects_lambda_outside_the_unit_interval() {
        let b = batch(array![[0.0], [1.0]]);
        assert!(dca_distances(&b, -0.1).is_err());
        assert!(dca_distances(&b, 1.5).is_err());
        assert!(dca_distances(&b, f64::NAN).is_err());
        assert!(dca_distances(&b, 0.0).is_ok());
        assert!(dca_distances(&b, 1.0).is_ok());
    }

    #[test]
    fn jaccard_rejects_tiny_or_malformed_similarity_input() {
        assert!(jaccard_distances(&array![[1.0]]).is_err());
        assert!(jaccard_distances(&array![[0.9, 0.5], [0.5, 1.0]]).is_err());
        assert!(jaccard_distances(&array![[1.0, 0.0], [0.0, 1.0]]).is_err());
        assert!(jaccard_distances(&array![[1.0, 0.5], [0.4, 1.0]]).is_err());
    }

    #[test]
    fn cross_distances_agree_with_the_joint_pairwise_matrix() {
        let a = batch(array![[0.0, 0.0], [3.0, 0.0]]);
        let b = batch(array![[0.0, 4.0], [1.0, 1.0]]);
        let cross = cross_distances(&a, &b).unwrap();
        assert_eq!(cross[[0, 0]], 4.0);
        assert_eq!(cross[[1, 0]], 5.0);
        assert!((cross[[0, 1]] - 2.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(cross.dim(), (2, 2));
    }

    #[test]
    fn cross_distances_reject_dimension_mismatch() {
        let a = batch(array![[0.0, 0.0], [3.0, 0.0]]);
        let b = batch(array![[0.0], [1.0]]);
        assert!(cross_distances(&a, &b).is_err());
    }
}
