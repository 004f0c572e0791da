//! Retrieval evaluation: mean average precision and CMC over a query set
//! ranked against a gallery.
//!
//! For each query the gallery is sorted by ascending distance (ties broken
//! by gallery index), average precision is the mean of the precision values
//! at each relevant rank, and CMC at k is the fraction of queries whose
//! first relevant hit appears within the top k. Means are accumulated
//! exactly, so reports are invariant under a permutation of the queries.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;

use crate::batch::EmbeddingBatch;
use crate::error::{DcaError, Result};
use crate::metric::{cross_distances, dca_distances};
use crate::numeric::exact_sum;

/// How query-to-gallery distances are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Plain Euclidean distances between embeddings.
    Euclidean,
    /// Blended distances over the joint query+gallery set: the context for
    /// each pair is the combined batch, and queries are ranked by their rows
    /// of the joint blended matrix.
    DcaRerank,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Euclidean => "euclidean",
            EvalMode::DcaRerank => "dca_rerank",
        })
    }
}

impl FromStr for EvalMode {
    type Err = DcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(EvalMode::Euclidean),
            "dca_rerank" => Ok(EvalMode::DcaRerank),
            other => Err(DcaError::invalid(format!(
                "unknown evaluation mode '{other}' (expected euclidean or dca_rerank)"
            ))),
        }
    }
}

/// The metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub mode: EvalMode,
    /// Blend weight used; present only in rerank mode.
    pub lambda: Option<f64>,
    /// Mean of the per-query average precisions.
    pub map: f64,
    /// `cmc[k]` is the fraction of queries with a relevant hit in the top
    /// k+1; the vector spans the whole gallery, so the last entry is 1.
    pub cmc: Vec<f64>,
    /// Average precision per query, in query order.
    pub per_query_ap: Vec<f64>,
}

impl RetrievalReport {
    /// Rank-1 accuracy (CMC at 1).
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    /// Machine-readable CSV: `#`-prefixed configuration echo lines, a
    /// `metric,mode,lambda,value` header, then one row per quantity. The
    /// lambda column is empty in modes that do not use it. Floats print in
    /// shortest round-trip form, so equal reports render byte-identically.
    pub fn to_csv(&self, config_echo: &[(String, String)]) -> String {
        let mut out = String::new();
        for (key, value) in config_echo {
            let _ = writeln!(out, "# {key} = {value}");
        }
        let _ = writeln!(out, "metric,mode,lambda,value");
        let lambda = self.lambda.map(|l| l.to_string()).unwrap_or_default();
        let row = |out: &mut String, metric: &str, value: f64| {
            let _ = writeln!(out, "{metric},{},{lambda},{value}", self.mode);
        };
        row(&mut out, "map", self.map);
        row(&mut out, "rank1", self.rank1());
        for (k, value) in self.cmc.iter().enumerate() {
            row(&mut out, &format!("cmc@{}", k + 1), *value);
        }
        for (q, ap) in self.per_query_ap.iter().enumerate() {
            row(&mut out, &format!("ap_q{q}"), *ap);
        }
        out
    }

    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode      {}", self.mode);
        if let Some(lambda) = self.lambda {
            let _ = writeln!(out, "lambda    {lambda:.4}");
        }
        let _ = writeln!(out, "queries   {}", self.per_query_ap.len());
        let _ = writeln!(out, "gallery   {}", self.cmc.len());
        let _ = writeln!(out, "mAP       {:.4}", self.map);
        for k in [1usize, 5, 10] {
            if k <= self.cmc.len() {
                let _ = writeln!(out, "rank-{k:<4} {:.4}", self.cmc[k - 1]);
            }
        }
        out
    }
}

/// Evaluates retrieval of `queries` against `gallery`.
///
/// Feature dimensions must match and every query identity must appear in the
/// gallery (the error names the first missing identity). `lambda` is the
/// blend weight for [`EvalMode::DcaRerank`] and is ignored — and recorded as
/// absent — in Euclidean mode.
pub fn evaluate(
    queries: &EmbeddingBatch,
    gallery: &EmbeddingBatch,
    mode: EvalMode,
    lambda: f64,
) -> Result<RetrievalReport> {
    if queries.dim() != gallery.dim() {
        return Err(DcaError::invalid(format!(
            "query dimension {} does not match gallery dimension {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    for &label in queries.labels() {
        if !gallery.labels().contains(&label) {
            return Err(DcaError::invalid(format!(
                "query identity {label} has no gallery sample"
            )));
        }
    }

    let distances = match mode {
        EvalMode::Euclidean => cross_distances(queries, gallery)?,
        EvalMode::DcaRerank => {
            let q = queries.len();
            let n = q + gallery.len();
            let mut joint = Array2::zeros((n, queries.dim()));
            for (row, src) in queries.features().rows().into_iter().enumerate() {
                joint.row_mut(row).assign(&src);
            }
            for (row, src) in gallery.features().rows().into_iter().enumerate() {
                joint.row_mut(q + row).assign(&src);
            }
            let mut labels = queries.labels().to_vec();
            labels.extend_from_slice(gallery.labels());
            let joint_batch = EmbeddingBatch::new(joint, labels)?;
            let bundle = dca_distances(&joint_batch, lambda)?;
            let mut cross = Array2::zeros((q, gallery.len()));
            for i in 0..q {
                for j in 0..gallery.len() {
                    cross[[i, j]] = bundle.dca()[[i, q + j]];
                }
            }
            cross
        }
    };

    let gallery_size = gallery.len();
    let mut per_query_ap = Vec::with_capacity(queries.len());
    let mut first_hits = Vec::with_capacity(queries.len());
    for (q, &label) in queries.labels().iter().enumerate() {
        let mut order: Vec<usize> = (0..gallery_size).collect();
        order.sort_unstable_by(|&a, &b| {
            distances[[q, a]]
                .partial_cmp(&distances[[q, b]])
                .expect("distances are finite")
                .then(a.cmp(&b))
        });
        let relevant = gallery.labels().iter().filter(|&&l| l == label).count();
        let mut hits = 0usize;
        let mut precision_terms = Vec::with_capacity(relevant);
        let mut first_hit = gallery_size;
        for (pos, &idx) in order.iter().enumerate() {
            if gallery.labels()[idx] == label {
                hits += 1;
                if hits == 1 {
                    first_hit = pos + 1;
                }
                precision_terms.push(hits as f64 / (pos + 1) as f64);
            }
        }
        per_query_ap.push(exact_sum(precision_terms) / relevant as f64);
        first_hits.push(first_hit);
    }

    let query_count = queries.len();
    let mut cmc = Vec::with_capacity(gallery_size);
    for k in 1..=gallery_size {
        let within = first_hits.iter().filter(|&&rank| rank <= k).count();
        cmc.push(within as f64 / query_count as f64);
    }
    let map = exact_sum(per_query_ap.iter().copied()) / query_count as f64;

    Ok(RetrievalReport {
        mode,
        lambda: match mode {
            EvalMode::DcaRerank => Some(lambda),
            EvalMode::Euclidean => None,
        },
        map,
        cmc,
        per_query_ap,
    })
}
