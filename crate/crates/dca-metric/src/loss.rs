//! Triplet hinge losses over plain and context-blended distances.
//!
//! Four variants pair a distance source with a mining strategy: the plain
//! Euclidean matrix or the context-blended matrix, mined batch-hard or
//! enumerated batch-all. Each triplet contributes
//!
//! ```text
//! hinge(d[anchor][positive] - d[anchor][negative] + margin)
//! ```
//!
//! and the batch loss averages these, either over all triplets or over only
//! the strictly positive ("active") ones. Hinge sums use exact accumulation,
//! so the value is invariant under a permutation of the batch.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::batch::EmbeddingBatch;
use crate::error::{DcaError, Result};
use crate::metric::{self, DcaDistances};
use crate::mining::{self, MiningVariant, TripletSet};
use crate::numeric::exact_sum;

/// Default hinge margin.
pub const DEFAULT_MARGIN: f64 = 1.2;

/// Default blend weight for the context-aware variants.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// The four loss variants: distance source × mining strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// Euclidean distances, batch-hard mining.
    TriBatchHard,
    /// Euclidean distances, batch-all enumeration.
    TriBatchAll,
    /// Context-blended distances, batch-hard mining.
    DcaBatchHard,
    /// Context-blended distances, batch-all enumeration.
    DcaBatchAll,
}

impl LossVariant {
    /// Whether this variant mines and scores on the blended distance.
    pub fn uses_context(self) -> bool {
        matches!(self, LossVariant::DcaBatchHard | LossVariant::DcaBatchAll)
    }

    /// The mining strategy this variant uses.
    pub fn mining(self) -> MiningVariant {
        match self {
            LossVariant::TriBatchHard | LossVariant::DcaBatchHard => MiningVariant::BatchHard,
            LossVariant::TriBatchAll | LossVariant::DcaBatchAll => MiningVariant::BatchAll,
        }
    }

    /// All variants, in a stable order.
    pub fn all() -> [LossVariant; 4] {
        [
            LossVariant::TriBatchHard,
            LossVariant::TriBatchAll,
            LossVariant::DcaBatchHard,
            LossVariant::DcaBatchAll,
        ]
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LossVariant::TriBatchHard => "tri_bh",
            LossVariant::TriBatchAll => "tri_ba",
            LossVariant::DcaBatchHard => "dca_bh",
            LossVariant::DcaBatchAll => "dca_ba",
        };
        f.write_str(name)
    }
}

impl FromStr for LossVariant {
    type Err = DcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tri_bh" => Ok(LossVariant::TriBatchHard),
            "tri_ba" => Ok(LossVariant::TriBatchAll),
            "dca_bh" => Ok(LossVariant::DcaBatchHard),
            "dca_ba" => Ok(LossVariant::DcaBatchAll),
            other => Err(DcaError::invalid(format!(
                "unknown loss variant '{other}' (expected tri_bh, tri_ba, dca_bh, or dca_ba)"
            ))),
        }
    }
}

/// Full configuration of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Hinge margin; must be finite and non-negative.
    pub margin: f64,
    /// Blend weight in `[0, 1]`; ignored by the Euclidean variants.
    pub lambda: f64,
    /// Average over active triplets only instead of all triplets.
    pub nonzero_average: bool,
    /// Treat the context matrix as a constant in the backward pass.
    pub detach_context: bool,
}

impl LossConfig {
    /// Defaults for a variant: margin 1.2, lambda 0.5, context attached, and
    /// non-zero averaging for the batch-all variants (their triplet count is
    /// dominated by easy triplets, which would otherwise dilute the signal).
    pub fn new(variant: LossVariant) -> Self {
        Self {
            variant,
            margin: DEFAULT_MARGIN,
            lambda: DEFAULT_LAMBDA,
            nonzero_average: variant.mining() == MiningVariant::BatchAll,
            detach_context: false,
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_nonzero_average(mut self, nonzero_average: bool) -> Self {
        self.nonzero_average = nonzero_average;
        self
    }

    pub fn with_detach_context(mut self, detach_context: bool) -> Self {
        self.detach_context = detach_context;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(DcaError::invalid(format!(
                "margin must be finite and non-negative, got {}",
                self.margin
            )));
        }
        metric::validate_lambda(self.lambda)
    }
}

/// Result of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutput {
    /// Averaged hinge value; exactly 0.0 when no triplet is active.
    pub value: f64,
    /// Number of triplets with a strictly positive hinge.
    pub active_count: usize,
    /// Number of triplets considered.
    pub total_count: usize,
}

/// Rectifier: `max(x, 0)`.
pub fn hinge(x: f64) -> f64 {
    x.max(0.0)
}

/// Where the mining/scoring matrix came from, kept alongside the evaluation
/// so the backward pass can reuse every intermediate.
#[derive(Debug, Clone)]
pub(crate) enum DistanceSource {
    /// Euclidean distances only.
    Plain(Array2<f64>),
    /// Full context chain.
    Context(Box<DcaDistances>),
    /// Context frozen to an externally supplied Jaccard matrix (used by the
    /// finite-difference oracle when the context is detached).
    Frozen { dist: Array2<f64>, dca: Array2<f64> },
}

impl DistanceSource {
    pub(crate) fn mining_matrix(&self) -> &Array2<f64> {
        match self {
            DistanceSource::Plain(d) => d,
            DistanceSource::Context(bundle) => bundle.dca(),
            DistanceSource::Frozen { dca, .. } => dca,
        }
    }
}

/// One fully evaluated loss: output plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct LossEvaluation {
    pub(crate) output: LossOutput,
    pub(crate) source: DistanceSource,
    pub(crate) triplets: TripletSet,
    /// Raw hinge arguments, one per triplet, in triplet order.
    pub(crate) hinge_args: Vec<f64>,
    /// Contribution of each active hinge to the loss (the reciprocal of the
    /// averaging denominator); 0.0 when nothing is active.
    pub(crate) weight: f64,
}

pub(crate) fn evaluate_loss(batch: &EmbeddingBatch, config: &LossConfig) -> Result<LossEvaluation> {
    config.validate()?;
    mining::validate_triplet_structure(batch.labels())?;
    let source = if config.variant.uses_context() {
        DistanceSource::Context(Box::new(metric::dca_distances(batch, config.lambda)?))
    } else {
        DistanceSource::Plain(metric::pairwise_distances(batch))
    };
    evaluate_with_source(batch, config, source)
}

/// Evaluates a context variant with the Jaccard matrix pinned to `jaccard`
/// instead of recomputing it from the batch. This is the forward pass the
/// finite-difference oracle uses when `detach_context` is set: the context
/// must not respond to the perturbation.
pub(crate) fn evaluate_loss_frozen(
    batch: &EmbeddingBatch,
    config: &LossConfig,
    jaccard: &Array2<f64>,
) -> Result<LossEvaluation> {
    config.validate()?;
    mining::validate_triplet_structure(batch.labels())?;
    if !config.variant.uses_context() {
        return Err(DcaError::invalid(
            "frozen-context evaluation only applies to context variants",
        ));
    }
    if jaccard.nrows() != batch.len() || jaccard.ncols() != batch.len() {
        return Err(DcaError::invalid(format!(
            "frozen jaccard matrix is {}x{}, batch has {} rows",
            jaccard.nrows(),
            jaccard.ncols(),
            batch.len()
        )));
    }
    let dist = metric::pairwise_distances(batch);
    let (_, dca) = metric::blend_matrices(&dist, jaccard, config.lambda);
    evaluate_with_source(batch, config, DistanceSource::Frozen { dist, dca })
}

fn evaluate_with_source(
    batch: &EmbeddingBatch,
    config: &LossConfig,
    source: DistanceSource,
) -> Result<LossEvaluation> {
    let matrix = source.mining_matrix();
    let triplets = match config.variant.mining() {
        MiningVariant::BatchHard => mining::mine_batch_hard(matrix, batch.labels())?,
        MiningVariant::BatchAll => mining::enumerate_batch_all(batch.labels())?,
    };
    let hinge_args: Vec<f64> = triplets
        .triplets
        .iter()
        .map(|t| matrix[[t.anchor, t.positive]] - matrix[[t.anchor, t.negative]] + config.margin)
        .collect();
    let total_count = hinge_args.len();
    let active_count = hinge_args.iter().filter(|&&z| z > 0.0).count();
    let denominator = if config.nonzero_average {
        active_count
    } else {
        total_count
    };
    let (value, weight) = if active_count == 0 {
        (0.0, 0.0)
    } else {
        let sum = exact_sum(hinge_args.iter().map(|&z| hinge(z)));
        (sum / denominator as f64, 1.0 / denominator as f64)
    };
    Ok(LossEvaluation {
        output: LossOutput {
            value,
            active_count,
            total_count,
        },
        source,
        triplets,
        hinge_args,
        weight,
    })
}

/// Evaluates the configured loss on one batch.
///
/// The batch must contain at least two identities with at least two samples
/// each. Returns the averaged hinge value together with the active and total
/// triplet counts; a batch where every hinge vanishes yields exactly 0.0
/// with `active_count` 0.
pub fn loss_forward(batch: &EmbeddingBatch, config: &LossConfig) -> Result<LossOutput> {
    Ok(evaluate_loss(batch, config)?.output)
}

/// Evaluates a context loss with the Jaccard matrix pinned to an externally
/// supplied constant instead of recomputing it from the batch.
///
/// This is the forward pass whose derivative a `detach_context` gradient is:
/// the context stays fixed while the Euclidean distances respond. It exists
/// so finite-difference verification of detached gradients can evaluate the
/// right function; the matrix must match the batch size and the variant must
/// be a context variant.
pub fn loss_forward_frozen(
    batch: &EmbeddingBatch,
    config: &LossConfig,
    jaccard: &Array2<f64>,
) -> Result<LossOutput> {
    Ok(evaluate_loss_frozen(batch, config, jaccard)?.output)
}
