//! Analytic loss gradients with respect to batch features, and a central
//! finite-difference checker for validating them.
//!
//! The backward pass walks the forward chain in reverse: hinge adjoints land
//! on mining-matrix entries, flow through the blend into the Euclidean and
//! Jaccard matrices, through the Jaccard ratio into the similarity kernel,
//! and finally through the kernel and the distance into the features. Mining
//! selections and the active-triplet set are treated as locally constant
//! (the loss is piecewise smooth; selections only change at ties, which are
//! measure-zero kinks).
//!
//! Subgradient conventions at the kinks: `hinge'(0) = 0`, the distance
//! gradient at a coincident pair is 0, and min/max ties inside the Jaccard
//! sums route their adjoint to the anchor-side operand.

use ndarray::Array2;

use crate::batch::EmbeddingBatch;
use crate::error::{DcaError, Result};
use crate::loss::{self, DistanceSource, LossConfig, LossEvaluation, LossOutput};
use crate::metric::{JACCARD_DENOM_FLOOR, SIM_EXPONENT_CLAMP};
use crate::mining::MiningVariant;

/// A loss gradient with respect to every feature coordinate, paired with the
/// loss output it belongs to. The value is bit-identical to what
/// [`loss::loss_forward`] returns for the same inputs: both come from the
/// same evaluation.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    /// d(loss)/d(features), same shape as the batch's feature matrix.
    pub grad: Array2<f64>,
    /// The loss output of the underlying forward pass.
    pub loss: LossOutput,
}

/// Computes the loss and its analytic gradient with respect to the batch
/// features. A batch whose hinges are all inactive yields an exactly zero
/// gradient.
pub fn loss_backward(batch: &EmbeddingBatch, config: &LossConfig) -> Result<GradientBuffer> {
    let eval = loss::evaluate_loss(batch, config)?;
    let grad = backward_from_eval(batch, config, &eval);
    Ok(GradientBuffer {
        grad,
        loss: eval.output,
    })
}

/// Backward pass over an existing evaluation.
fn backward_from_eval(
    batch: &EmbeddingBatch,
    config: &LossConfig,
    eval: &LossEvaluation,
) -> Array2<f64> {
    let n = batch.len();

    // Hinge adjoints on the ordered entries of the mining matrix: an active
    // triplet pulls its positive entry up and its negative entry down, each
    // by the averaging weight.
    let mut adj_mining: Array2<f64> = Array2::zeros((n, n));
    if eval.weight != 0.0 {
        for (t, &z) in eval.triplets.triplets.iter().zip(&eval.hinge_args) {
            if z > 0.0 {
                adj_mining[[t.anchor, t.positive]] += eval.weight;
                adj_mining[[t.anchor, t.negative]] -= eval.weight;
            }
        }
    }

    // Route the mining adjoints down to Euclidean-distance adjoints.
    let adj_dist = match &eval.source {
        DistanceSource::Plain(_) => adj_mining,
        DistanceSource::Context(bundle) => {
            let dist = bundle.dist();
            let sim = bundle.similarity();
            let jac = bundle.jaccard();
            let lambda = bundle.lambda();
            let mut adj_dist: Array2<f64> = Array2::zeros((n, n));

            // Direct Euclidean path: d appears in (1 - lambda)*d and j*d.
            for i in 0..n {
                for j in 0..n {
                    let g = adj_mining[[i, j]];
                    if g != 0.0 {
                        adj_dist[[i, j]] += g * ((1.0 - lambda) + jac[[i, j]]);
                    }
                }
            }

            // Context path, skipped when the configuration detaches it.
            if !config.detach_context {
                let mut adj_sim: Array2<f64> = Array2::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        let g = adj_mining[[i, j]];
                        if g == 0.0 {
                            continue;
                        }
                        // j appears in lambda*j and j*d.
                        let upstream = g * (lambda + dist[[i, j]]);
                        let s = bundle.min_sums()[[i, j]];
                        let t = bundle.max_sums()[[i, j]];
                        let denom = t.max(JACCARD_DENOM_FLOOR);
                        // j = 1 - s/denom; the floor is inert whenever the
                        // real denominator exceeds it (always, in practice).
                        let to_min_sum = upstream * (-1.0 / denom);
                        let to_max_sum = if t > JACCARD_DENOM_FLOOR {
                            upstream * (s / (denom * denom))
                        } else {
                            0.0
                        };
                        for k in 0..n {
                            let vik = sim[[i, k]];
                            let vjk = sim[[j, k]];
                            // min picks the smaller operand, max the larger;
                            // ties route to the anchor-side row i.
                            if vik <= vjk {
                                adj_sim[[i, k]] += to_min_sum;
                            } else {
                                adj_sim[[j, k]] += to_min_sum;
                            }
                            if vik >= vjk {
                                adj_sim[[i, k]] += to_max_sum;
                            } else {
                                adj_sim[[j, k]] += to_max_sum;
                            }
                        }
                    }
                }
                // Kernel: v = exp(-min(d, clamp)), so dv/dd = -v below the
                // clamp and 0 above it. Diagonal entries are pinned at 1 and
                // carry no derivative.
                for i in 0..n {
                    for k in 0..n {
                        if i == k {
                            continue;
                        }
                        let g = adj_sim[[i, k]];
                        if g != 0.0 && dist[[i, k]] < SIM_EXPONENT_CLAMP {
                            adj_dist[[i, k]] += g * (-sim[[i, k]]);
                        }
                    }
                }
            }
            adj_dist
        }
        DistanceSource::Frozen { .. } => {
            unreachable!("frozen evaluations are forward-only")
        }
    };

    // Distance adjoints to feature gradients. Both ordered entries of a pair
    // describe the same distance, so their adjoints add; the gradient of
    // d(x_i, x_j) is the unit difference vector, with the subgradient 0 at a
    // coincident pair.
    let dist = match &eval.source {
        DistanceSource::Plain(d) => d,
        DistanceSource::Context(bundle) => bundle.dist(),
        DistanceSource::Frozen { dist, .. } => dist,
    };
    let x = batch.features();
    let mut grad: Array2<f64> = Array2::zeros((n, batch.dim()));
    for i in 0..n {
        for j in (i + 1)..n {
            let c = adj_dist[[i, j]] + adj_dist[[j, i]];
            let d = dist[[i, j]];
            if c == 0.0 || d == 0.0 {
                continue;
            }
            for col in 0..batch.dim() {
                let u = (x[[i, col]] - x[[j, col]]) / d;
                grad[[i, col]] += c * u;
                grad[[j, col]] -= c * u;
            }
        }
    }
    grad
}

/// Result of one finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// Maximum over coordinates of
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// True when the base configuration sits within one perturbation of a
    /// non-differentiable point (hinge at zero, coincident pair, batch-hard
    /// selection tie, or similarity min/max tie). A flagged configuration
    /// says nothing about gradient correctness; callers should resample.
    pub touched_kink: bool,
    /// False when some coordinate's gradient magnitude falls inside the
    /// window where central differences lose relative accuracy to rounding
    /// noise (below ~1e-4 of the loss scale but not exactly zero). Callers
    /// should resample rather than read meaning into the error there.
    pub well_conditioned: bool,
    /// Loss output at the base point.
    pub loss: LossOutput,
}

/// Validates the analytic gradient against central finite differences,
/// perturbing every feature coordinate by ±`step`.
///
/// `step` must lie in `[1e-8, 1e-3]`. For `detach_context` configurations
/// the numeric side evaluates the frozen-context forward, matching the
/// function the detached gradient differentiates. The report carries the
/// worst relative error plus the kink and conditioning flags that tell a
/// caller whether that error is meaningful.
pub fn finite_difference_check(
    batch: &EmbeddingBatch,
    config: &LossConfig,
    step: f64,
) -> Result<FdReport> {
    if !step.is_finite() || !(1e-8..=1e-3).contains(&step) {
        return Err(DcaError::invalid(format!(
            "finite-difference step must lie in [1e-8, 1e-3], got {step}"
        )));
    }
    let eval = loss::evaluate_loss(batch, config)?;
    let analytic = backward_from_eval(batch, config, &eval);
    let touched_kink = detect_kinks(batch, config, &eval, step);
    let frozen_jaccard = match &eval.source {
        DistanceSource::Context(bundle) if config.detach_context => Some(bundle.jaccard().clone()),
        _ => None,
    };

    let value_at = |probe: &EmbeddingBatch| -> Result<f64> {
        match &frozen_jaccard {
            Some(jac) => Ok(loss::loss_forward_frozen(probe, config, jac)?.value),
            None => Ok(loss::loss_forward(probe, config)?.value),
        }
    };

    // Below this magnitude (relative to the loss scale) the subtraction in
    // the central difference is dominated by f64 rounding of the two loss
    // evaluations, so relative errors there measure noise, not correctness.
    let conditioning_floor = 1e-4 * eval.output.value.abs().max(1.0);

    let mut max_rel_error: f64 = 0.0;
    let mut well_conditioned = true;
    let mut probe = batch.clone();
    for row in 0..batch.len() {
        for col in 0..batch.dim() {
            let base = batch.features()[[row, col]];
            probe.features_mut()[[row, col]] = base + step;
            let plus = value_at(&probe)?;
            probe.features_mut()[[row, col]] = base - step;
            let minus = value_at(&probe)?;
            probe.features_mut()[[row, col]] = base;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[[row, col]];
            let scale = a.abs().max(numeric.abs());
            let rel = (a - numeric).abs() / scale.max(1e-8);
            max_rel_error = max_rel_error.max(rel);
            if scale > 0.0 && scale < conditioning_floor {
                well_conditioned = false;
            }
        }
    }
    Ok(FdReport {
        max_rel_error,
        touched_kink,
        well_conditioned,
        loss: eval.output,
    })
}

/// Conservatively detects whether any piecewise boundary of the loss lies
/// within reach of a ±`step` coordinate perturbation at the base point.
fn detect_kinks(
    batch: &EmbeddingBatch,
    config: &LossConfig,
    eval: &LossEvaluation,
    step: f64,
) -> bool {
    let n = batch.len();
    let labels = batch.labels();
    let matrix = eval.source.mining_matrix();
    let (dist, sim) = match &eval.source {
        DistanceSource::Plain(d) => (d, None),
        DistanceSource::Context(bundle) => (
            bundle.dist(),
            (!config.detach_context).then(|| bundle.similarity()),
        ),
        DistanceSource::Frozen { dist, .. } => (dist, None),
    };

    // How much one mining-matrix entry can move under a ±step perturbation
    // of a single coordinate. Euclidean entries are 1-Lipschitz; a blended
    // entry additionally moves through the Jaccard term, whose sums touch up
    // to n kernel values, each 1-Lipschitz in its distance, giving the
    // (loose but sufficient) row bound 2n on the Jaccard sensitivity.
    let entry_reach = if !config.variant.uses_context() {
        step
    } else if config.detach_context {
        step * ((1.0 - config.lambda) + 1.0)
    } else {
        let d_max = dist.iter().fold(0.0_f64, |acc, &v| acc.max(v));
        step * ((1.0 - config.lambda) + 1.0 + (config.lambda + d_max) * 2.0 * n as f64)
    };
    // A hinge argument reads two entries.
    let hinge_reach = 2.0 * entry_reach;

    // Hinge arguments close enough to zero to change activation.
    if eval.hinge_args.iter().any(|&z| z.abs() <= hinge_reach) {
        return true;
    }

    // Near-coincident pairs: the distance itself (and the kernel's min/max
    // self-terms) are not differentiable there.
    for i in 0..n {
        for j in (i + 1)..n {
            if dist[[i, j]] <= 2.0 * step {
                return true;
            }
        }
    }

    // Batch-hard selections within flipping distance of their runner-up.
    if config.variant.mining() == MiningVariant::BatchHard {
        for anchor in 0..n {
            let mut pos: Vec<f64> = Vec::new();
            let mut neg: Vec<f64> = Vec::new();
            for other in 0..n {
                if other == anchor {
                    continue;
                }
                if labels[other] == labels[anchor] {
                    pos.push(matrix[[anchor, other]]);
                } else {
                    neg.push(matrix[[anchor, other]]);
                }
            }
            pos.sort_by(|a, b| b.partial_cmp(a).unwrap());
            neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if pos.len() >= 2 && pos[0] - pos[1] <= hinge_reach {
                return true;
            }
            if neg.len() >= 2 && neg[1] - neg[0] <= hinge_reach {
                return true;
            }
        }
    }

    // Min/max ties inside the Jaccard sums (kernel values are 1-Lipschitz in
    // the features, so a ±step perturbation moves each by at most step).
    if let Some(sim) = sim {
        for i in 0..n {
            for j in (i + 1)..n {
                for k in 0..n {
                    if (sim[[i, k]] - sim[[j, k]]).abs() <= 2.0 * step {
                        return true;
                    }
                }
            }
        }
    }
    false
}
