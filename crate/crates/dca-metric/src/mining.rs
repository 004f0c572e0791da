//! Batch composition and triplet mining.
//!
//! Training batches follow the P×K convention: `identities` distinct labels
//! with `per_identity` samples each. Within such a batch, triplets are
//! formed either by taking each sample's hardest positive and hardest
//! negative (batch-hard) or by enumerating every valid combination
//! (batch-all).

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use crate::error::{DcaError, Result};

/// Shape of a sampled training batch: P identities with K samples each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PkSpec {
    /// Number of distinct identities per batch (P).
    pub identities: usize,
    /// Number of samples drawn per identity (K).
    pub per_identity: usize,
    /// Seed for the sampler's random stream.
    pub seed: u64,
}

impl PkSpec {
    /// Builds a spec, requiring at least two identities and at least two
    /// samples per identity (anything less admits no triplets).
    pub fn new(identities: usize, per_identity: usize, seed: u64) -> Result<Self> {
        if identities < 2 {
            return Err(DcaError::invalid(format!(
                "need at least 2 identities per batch, got {identities}"
            )));
        }
        if per_identity < 2 {
            return Err(DcaError::invalid(format!(
                "need at least 2 samples per identity, got {per_identity}"
            )));
        }
        Ok(Self {
            identities,
            per_identity,
            seed,
        })
    }

    /// Total batch size P*K.
    pub fn batch_size(&self) -> usize {
        self.identities * self.per_identity
    }
}

/// One (anchor, positive, negative) index triple within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// How a triplet set was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningVariant {
    /// One triplet per anchor: its hardest positive and hardest negative.
    BatchHard,
    /// Every valid (anchor, positive, negative) combination.
    BatchAll,
}

/// The triplets mined from one batch, in a deterministic order.
#[derive(Debug, Clone)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
    pub variant: MiningVariant,
}

/// Groups dataset indices by label, in ascending label order.
fn group_by_label(labels: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (idx, &label) in labels.iter().enumerate() {
        groups.entry(label).or_default().push(idx);
    }
    groups
}

/// Checks that a label slice can supply triplets: at least two distinct
/// labels, each appearing at least twice. Returns the offending label in the
/// error message otherwise.
pub fn validate_triplet_structure(labels: &[u32]) -> Result<()> {
    let groups = group_by_label(labels);
    if groups.len() < 2 {
        return Err(DcaError::invalid(format!(
            "triplet mining needs at least 2 identities, got {}",
            groups.len()
        )));
    }
    for (label, members) in &groups {
        if members.len() < 2 {
            return Err(DcaError::invalid(format!(
                "identity {label} has {} sample(s); every identity needs at least 2",
                members.len()
            )));
        }
    }
    Ok(())
}

/// Samples a P×K batch from a labelled dataset: `spec.identities` distinct
/// labels chosen without replacement, then `spec.per_identity` samples from
/// each — without replacement when the identity has enough samples, with
/// replacement otherwise so small identities are never dropped.
///
/// Returns dataset row indices grouped by identity (K consecutive indices
/// per chosen identity). The draw consumes the passed RNG deterministically,
/// so equal seeds give equal batches. Errors when the dataset holds fewer
/// distinct labels than `spec.identities`.
pub fn pk_sample(labels: &[u32], spec: &PkSpec, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let groups = group_by_label(labels);
    if groups.len() < spec.identities {
        return Err(DcaError::invalid(format!(
            "dataset has {} distinct identities, batch needs {}",
            groups.len(),
            spec.identities
        )));
    }
    let ordered: Vec<&Vec<usize>> = groups.values().collect();
    let chosen = rand::seq::index::sample(rng, ordered.len(), spec.identities);
    let mut batch = Vec::with_capacity(spec.batch_size());
    for group_idx in chosen {
        let members = ordered[group_idx];
        if members.len() >= spec.per_identity {
            for pick in rand::seq::index::sample(rng, members.len(), spec.per_identity) {
                batch.push(members[pick]);
            }
        } else {
            for _ in 0..spec.per_identity {
                batch.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    Ok(batch)
}

/// Batch-hard mining: for each anchor, the same-label sample at maximal
/// distance and the different-label sample at minimal distance, read from a
/// precomputed distance matrix. Ties resolve to the smallest index, making
/// the result deterministic. Triplets are emitted in ascending anchor order.
///
/// Errors when the matrix is not square, does not match the label count, or
/// when some anchor has no positive or no negative available.
pub fn mine_batch_hard(distances: &Array2<f64>, labels: &[u32]) -> Result<TripletSet> {
    if distances.nrows() != distances.ncols() {
        return Err(DcaError::invalid(format!(
            "distance matrix must be square, got {}x{}",
            distances.nrows(),
            distances.ncols()
        )));
    }
    if distances.nrows() != labels.len() {
        return Err(DcaError::invalid(format!(
            "distance matrix size {} does not match label count {}",
            distances.nrows(),
            labels.len()
        )));
    }
    validate_triplet_structure(labels)?;
    let n = labels.len();
    let mut triplets = Vec::with_capacity(n);
    for anchor in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for other in 0..n {
            if other == anchor {
                continue;
            }
            let d = distances[[anchor, other]];
            if labels[other] == labels[anchor] {
                // Strict comparison keeps the first (smallest-index) maximum.
                if hardest_pos.is_none_or(|(_, best)| d > best) {
                    hardest_pos = Some((other, d));
                }
            } else if hardest_neg.is_none_or(|(_, best)| d < best) {
                hardest_neg = Some((other, d));
            }
        }
        match (hardest_pos, hardest_neg) {
            (Some((positive, _)), Some((negative, _))) => triplets.push(Triplet {
                anchor,
                positive,
                negative,
            }),
            _ => {
                return Err(DcaError::invalid(format!(
                    "anchor {anchor} has no positive or no negative in the batch"
                )))
            }
        }
    }
    Ok(TripletSet {
        triplets,
        variant: MiningVariant::BatchHard,
    })
}

/// Batch-all enumeration: every (anchor, positive, negative) with the
/// positive sharing the anchor's label (and distinct from it) and the
/// negative differing, in lexicographic (anchor, positive, negative) order.
///
/// For a P×K batch this yields exactly `PK * (PK - K) * (K - 1)` triplets.
pub fn enumerate_batch_all(labels: &[u32]) -> Result<TripletSet> {
    validate_triplet_structure(labels)?;
    let n = labels.len();
    let mut triplets = Vec::new();
    for anchor in 0..n {
        for positive in 0..n {
            if positive == anchor || labels[positive] != labels[anchor] {
                continue;
            }
            for negative in 0..n {
                if labels[negative] == labels[anchor] {
                    continue;
                }
                triplets.push(Triplet {
                    anchor,
                    positive,
                    negative,
                });
            }
        }
    }
    Ok(TripletSet {
        triplets,
        variant: MiningVariant::BatchAll,
    })
}
