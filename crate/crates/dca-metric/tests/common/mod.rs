//! Shared helpers for the integration suites: naive loop oracles that
//! re-derive every quantity from its definition, plus seeded generators.
//!
//! The oracles deliberately avoid the library's computation strategies:
//! distances come from per-pair difference loops instead of the Gram
//! expansion, mining from plain nested loops, and reductions from
//! straightforward accumulation (except where a test asserts bitwise
//! equality, which requires the correctly-rounded sum on both sides).
#![allow(dead_code)]

use dca_metric::{
    dca_distances, evaluate, exact_sum, finite_difference_check, loss_backward, loss_forward,
    loss_forward_frozen, EmbeddingBatch, EvalMode, FdReport, LossConfig, LossVariant, MlpModel,
    RetrievalReport,
};
use ndarray::{Array1, Array2};
use rand::prelude::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const SIM_CLAMP: f64 = 80.0;
pub const DENOM_FLOOR: f64 = 1e-12;

/// Per-pair difference-route Euclidean distances.
pub fn naive_pairwise(features: &Array2<f64>) -> Array2<f64> {
    let n = features.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut sq = 0.0;
            for k in 0..features.ncols() {
                let diff = features[[i, k]] - features[[j, k]];
                sq += diff * diff;
            }
            out[[i, j]] = sq.sqrt();
        }
    }
    out
}

/// Cross distances between two row sets, difference route.
pub fn naive_cross(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for i in 0..a.nrows() {
        for j in 0..b.nrows() {
            let mut sq = 0.0;
            for k in 0..a.ncols() {
                let diff = a[[i, k]] - b[[j, k]];
                sq += diff * diff;
            }
            out[[i, j]] = sq.sqrt();
        }
    }
    out
}

/// Gaussian kernel on a distance matrix, unit diagonal.
pub fn naive_similarity(dist: &Array2<f64>) -> Array2<f64> {
    let n = dist.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = if i == j {
                1.0
            } else {
                (-dist[[i, j]].min(SIM_CLAMP)).exp()
            };
        }
    }
    out
}

/// Soft Jaccard distance between similarity rows, plain accumulation,
/// both triangles computed independently.
pub fn naive_jaccard(sim: &Array2<f64>) -> Array2<f64> {
    let n = sim.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            let mut t = 0.0;
            for k in 0..n {
                s += sim[[i, k]].min(sim[[j, k]]);
                t += sim[[i, k]].max(sim[[j, k]]);
            }
            out[[i, j]] = 1.0 - s / t.max(DENOM_FLOOR);
        }
    }
    out
}

/// The blended distance and its interaction term, elementwise.
pub fn naive_blend(
    dist: &Array2<f64>,
    jaccard: &Array2<f64>,
    lambda: f64,
) -> (Array2<f64>, Array2<f64>) {
    let n = dist.nrows();
    let mut weighted = Array2::zeros((n, n));
    let mut dca = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let d = dist[[i, j]];
            let jc = jaccard[[i, j]];
            let w = jc * d;
            weighted[[i, j]] = w;
            dca[[i, j]] = (1.0 - lambda) * d + lambda * jc + w;
        }
    }
    (weighted, dca)
}

/// Full naive chain from features to the blended matrix.
pub fn naive_dca(features: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let dist = naive_pairwise(features);
    let sim = naive_similarity(&dist);
    let jaccard = naive_jaccard(&sim);
    naive_blend(&dist, &jaccard, lambda).1
}

/// Batch-hard triplets by plain loops: farthest positive and nearest
/// negative per anchor, strict comparisons so the first extremum wins.
pub fn naive_batch_hard(matrix: &Array2<f64>, labels: &[u32]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut triplets = Vec::new();
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for x in 0..n {
            if x != a
                && labels[x] == labels[a]
                && pos.is_none_or(|p| matrix[[a, x]] > matrix[[a, p]])
            {
                pos = Some(x);
            }
            if labels[x] != labels[a] && neg.is_none_or(|m| matrix[[a, x]] < matrix[[a, m]]) {
                neg = Some(x);
            }
        }
        if let (Some(p), Some(m)) = (pos, neg) {
            triplets.push((a, p, m));
        }
    }
    triplets
}

/// Every valid triplet in lexicographic (anchor, positive, negative) order.
pub fn naive_batch_all(labels: &[u32]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut triplets = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for m in 0..n {
                if labels[m] != labels[a] {
                    triplets.push((a, p, m));
                }
            }
        }
    }
    triplets
}

/// Naive loss value: matrices, mining, hinge, and mean all re-derived
/// with plain loops. Returns (value, active count, total count).
pub fn naive_loss(
    features: &Array2<f64>,
    labels: &[u32],
    config: &LossConfig,
) -> (f64, usize, usize) {
    let matrix = if config.variant.uses_context() {
        naive_dca(features, config.lambda)
    } else {
        naive_pairwise(features)
    };
    let triplets = match config.variant {
        LossVariant::TriBatchHard | LossVariant::DcaBatchHard => naive_batch_hard(&matrix, labels),
        LossVariant::TriBatchAll | LossVariant::DcaBatchAll => naive_batch_all(labels),
    };
    let total = triplets.len();
    let mut sum = 0.0;
    let mut active = 0;
    for &(a, p, m) in &triplets {
        let z = matrix[[a, p]] - matrix[[a, m]] + config.margin;
        if z > 0.0 {
            active += 1;
            sum += z;
        }
    }
    let denominator = if config.nonzero_average {
        active
    } else {
        total
    };
    let value = if denominator == 0 {
        0.0
    } else {
        sum / denominator as f64
    };
    (value, active, total)
}

/// Brute-force sort-and-scan retrieval oracle over a precomputed
/// query-by-gallery distance matrix. Ranking uses a stable sort on the
/// distance alone, so exact ties keep ascending gallery order. Averages
/// use the correctly-rounded sum so the comparison can be bitwise.
pub struct OracleReport {
    pub map: f64,
    pub cmc: Vec<f64>,
    pub per_query_ap: Vec<f64>,
}

pub fn oracle_retrieval(
    dist: &Array2<f64>,
    query_labels: &[u32],
    gallery_labels: &[u32],
) -> OracleReport {
    let gallery_size = gallery_labels.len();
    let mut per_query_ap = Vec::with_capacity(query_labels.len());
    let mut first_hits = Vec::with_capacity(query_labels.len());
    for (q, &label) in query_labels.iter().enumerate() {
        let mut order: Vec<usize> = (0..gallery_size).collect();
        order.sort_by(|&a, &b| dist[[q, a]].partial_cmp(&dist[[q, b]]).unwrap());
        let relevant = gallery_labels.iter().filter(|&&g| g == label).count();
        let mut hits = 0usize;
        let mut terms = Vec::new();
        let mut first_hit = None;
        for (rank0, &g) in order.iter().enumerate() {
            if gallery_labels[g] == label {
                hits += 1;
                terms.push(hits as f64 / (rank0 + 1) as f64);
                if first_hit.is_none() {
                    first_hit = Some(rank0 + 1);
                }
            }
        }
        per_query_ap.push(exact_sum(terms) / relevant as f64);
        first_hits.push(first_hit.expect("oracle queries must have matches"));
    }
    let queries = query_labels.len();
    let cmc = (1..=gallery_size)
        .map(|k| first_hits.iter().filter(|&&h| h <= k).count() as f64 / queries as f64)
        .collect();
    let map = exact_sum(per_query_ap.iter().copied()) / queries as f64;
    OracleReport {
        map,
        cmc,
        per_query_ap,
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal feature matrix scaled by `scale`.
pub fn random_features(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let draw: f64 = StandardNormal.sample(rng);
        draw * scale
    })
}

/// Identity-structured batch: `ids` labels with `per_id` samples each,
/// rows shuffled so index order carries no label structure.
pub fn random_batch(
    rng: &mut ChaCha8Rng,
    ids: usize,
    per_id: usize,
    cols: usize,
) -> EmbeddingBatch {
    let n = ids * per_id;
    let features = random_features(rng, n, cols, 1.0);
    let mut labels: Vec<u32> = (0..n).map(|i| (i / per_id) as u32).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    EmbeddingBatch::new(features, labels).expect("generated batch is valid")
}

/// Uniformly sampled loss variant.
pub fn random_variant(rng: &mut ChaCha8Rng) -> LossVariant {
    *LossVariant::all().choose(rng).expect("non-empty")
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .fold(0.0_f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Worst absolute divergence between the library's metric chain plus
/// all four default-shape losses and the naive oracles, for one batch.
/// Panics if any triplet count disagrees (counts are exact integers).
pub fn oracle_divergence(batch: &EmbeddingBatch, lambda: f64, margin: f64, nonzero: bool) -> f64 {
    let bundle = dca_distances(batch, lambda).expect("valid batch");
    let odist = naive_pairwise(batch.features());
    let osim = naive_similarity(&odist);
    let ojac = naive_jaccard(&osim);
    let (oweighted, odca) = naive_blend(&odist, &ojac, lambda);

    let mut worst = max_abs_diff(bundle.dist(), &odist);
    worst = worst.max(max_abs_diff(bundle.similarity(), &osim));
    worst = worst.max(max_abs_diff(bundle.jaccard(), &ojac));
    worst = worst.max(max_abs_diff(bundle.weighted(), &oweighted));
    worst = worst.max(max_abs_diff(bundle.dca(), &odca));

    for variant in LossVariant::all() {
        let config = LossConfig::new(variant)
            .with_margin(margin)
            .with_lambda(lambda)
            .with_nonzero_average(nonzero);
        let out = loss_forward(batch, &config).expect("valid batch");
        let (ovalue, oactive, ototal) = naive_loss(batch.features(), batch.labels(), &config);
        assert_eq!(out.active_count, oactive, "{variant}: active count");
        assert_eq!(out.total_count, ototal, "{variant}: total count");
        worst = worst.max((out.value - ovalue).abs());
    }
    worst
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-5;

/// Kink-detection step for the embedding-level gate probe used by the
/// end-to-end parameter checks. A parameter step moves every embedding
/// row at once, so hinge arguments can shift by an order of magnitude
/// more than under the single-coordinate feature steps the probe
/// models. Gating with the coarsest admissible probe step keeps the
/// required clearances about two orders of magnitude above the
/// parameter-step reach.
pub const GATE_STEP: f64 = 1e-3;

/// Draws configurations until the finite-difference probe reports a
/// smooth, well-conditioned landscape with active triplets. Acceptance
/// is decided purely by the a-priori flags, never by the error value.
pub fn smooth_report(variant: LossVariant, detach: bool, stream: u64, index: u64) -> FdReport {
    for attempt in 0..200u64 {
        let mut rng = seeded(stream ^ (index * 1_000 + attempt));
        let ids = rng.random_range(2..=3usize);
        let per_id = rng.random_range(2..=3usize);
        let cols = rng.random_range(2..=4usize);
        let batch = random_batch(&mut rng, ids, per_id, cols);
        let config = LossConfig::new(variant)
            .with_margin(rng.random_range(0.5..=1.5))
            .with_lambda(rng.random_range(0.1..=0.9))
            .with_detach_context(detach && variant.uses_context());
        let report = finite_difference_check(&batch, &config, FD_STEP).unwrap();
        if !report.touched_kink && report.well_conditioned && report.loss.value > 1e-3 {
            return report;
        }
    }
    panic!("no smooth configuration found for {variant} (stream {stream}, index {index})");
}

pub struct EndToEndCase {
    pub model: MlpModel,
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
    pub config: LossConfig,
}

pub struct EndToEndOutcome {
    pub max_rel: f64,
    pub verified: usize,
    pub total: usize,
    pub variant: LossVariant,
    pub detach: bool,
    pub normalize: bool,
}

/// Loss of the embedded batch under the current parameters; when the
/// context is detached, the externally fixed Jaccard matrix is used.
fn end_to_end_loss(case: &EndToEndCase, frozen: Option<&Array2<f64>>) -> f64 {
    let output = case.model.forward(&case.features).unwrap();
    let batch = EmbeddingBatch::new(output, case.labels.clone()).unwrap();
    match frozen {
        Some(jaccard) => {
            loss_forward_frozen(&batch, &case.config, jaccard)
                .unwrap()
                .value
        }
        None => loss_forward(&batch, &case.config).unwrap().value,
    }
}

/// Draws an end-to-end case whose smoothness is established a priori:
/// the embedding-level probe reports no kinks and good conditioning,
/// and every rectifier input sits clear of its corner.
fn smooth_end_to_end(
    variant: LossVariant,
    detach: bool,
    normalize: bool,
    index: u64,
) -> EndToEndCase {
    for attempt in 0..300u64 {
        let mut rng = seeded(0xE2E ^ (index * 1_000 + attempt));
        let ids = rng.random_range(2..=3usize);
        let per_id = 2usize;
        let d_in = rng.random_range(3..=4usize);
        let d_emb = rng.random_range(3..=4usize);
        let hidden = rng.random_range(4..=6usize);
        let n = ids * per_id;

        let features = random_features(&mut rng, n, d_in, 1.0);
        let labels: Vec<u32> = (0..n).map(|i| (i / per_id) as u32).collect();
        let mut model = MlpModel::new(&[d_in, hidden, d_emb], rng.random()).unwrap();
        model.normalize_output = normalize;

        let config = LossConfig::new(variant)
            .with_margin(rng.random_range(0.5..=1.5))
            .with_lambda(rng.random_range(0.2..=0.8))
            .with_detach_context(detach && variant.uses_context());

        let cache = model.forward_cached(&features).unwrap();
        let corner_clearance = cache.pre_activations()[..cache.pre_activations().len() - 1]
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |acc, z| acc.min(z.abs()));
        let norm_clearance = cache
            .pre_activations()
            .last()
            .unwrap()
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|z| z * z).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        if corner_clearance <= 1e-3 || (normalize && norm_clearance <= 1e-2) {
            continue;
        }

        let embedded = EmbeddingBatch::new(cache.output().clone(), labels.clone()).unwrap();
        let probe = finite_difference_check(&embedded, &config, GATE_STEP).unwrap();
        if probe.touched_kink || !probe.well_conditioned || probe.loss.value <= 1e-3 {
            continue;
        }
        return EndToEndCase {
            model,
            features,
            labels,
            config,
        };
    }
    panic!("no smooth end-to-end case found (index {index})");
}

/// One end-to-end gradient check: analytic parameter gradients, chained
/// through the loss and the embedder, against central differences.
/// Coordinates whose gradient sits below the central-difference noise
/// floor cannot be judged at this tolerance and are skipped, but only
/// when analytic and numeric agree the coordinate is negligible.
pub fn end_to_end_check(index: u64) -> EndToEndOutcome {
    let variants = LossVariant::all();
    let variant = variants[(index % 4) as usize];
    let detach = (12..16).contains(&index);
    let normalize = index >= 16;
    let mut case = smooth_end_to_end(variant, detach, normalize, index);

    let cache = case.model.forward_cached(&case.features).unwrap();
    let embedded = EmbeddingBatch::new(cache.output().clone(), case.labels.clone()).unwrap();
    let frozen = if case.config.detach_context {
        Some(
            dca_distances(&embedded, case.config.lambda)
                .unwrap()
                .jaccard()
                .clone(),
        )
    } else {
        None
    };
    let buffer = loss_backward(&embedded, &case.config).unwrap();
    let grads = case.model.backward(&cache, &buffer.grad).unwrap();

    let floor = 1e-4 * buffer.loss.value.abs().max(1.0);
    let mut max_rel: f64 = 0.0;
    let mut verified = 0usize;
    let mut total = 0usize;
    let mut check = |analytic: f64, numeric: f64| {
        total += 1;
        if analytic.abs() < floor && numeric.abs() < floor {
            return;
        }
        verified += 1;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    };
    for layer in 0..case.model.layers.len() {
        let weight_dim = case.model.layers[layer].weights.dim();
        for r in 0..weight_dim.0 {
            for c in 0..weight_dim.1 {
                case.model.layers[layer].weights[[r, c]] += FD_STEP;
                let up = end_to_end_loss(&case, frozen.as_ref());
                case.model.layers[layer].weights[[r, c]] -= 2.0 * FD_STEP;
                let down = end_to_end_loss(&case, frozen.as_ref());
                case.model.layers[layer].weights[[r, c]] += FD_STEP;
                check(grads.weights[layer][[r, c]], (up - down) / (2.0 * FD_STEP));
            }
        }
        for b in 0..case.model.layers[layer].biases.len() {
            case.model.layers[layer].biases[b] += FD_STEP;
            let up = end_to_end_loss(&case, frozen.as_ref());
            case.model.layers[layer].biases[b] -= 2.0 * FD_STEP;
            let down = end_to_end_loss(&case, frozen.as_ref());
            case.model.layers[layer].biases[b] += FD_STEP;
            check(grads.biases[layer][b], (up - down) / (2.0 * FD_STEP));
        }
    }
    EndToEndOutcome {
        max_rel,
        verified,
        total,
        variant,
        detach,
        normalize,
    }
}

pub struct Instance {
    pub batch: EmbeddingBatch,
    pub queries: EmbeddingBatch,
    pub gallery: EmbeddingBatch,
    pub config: LossConfig,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let ids = rng.random_range(2..=4usize);
    let per_id = rng.random_range(2..=3usize);
    let cols = rng.random_range(2..=6usize);
    let batch = random_batch(rng, ids, per_id, cols);
    let queries = EmbeddingBatch::new(
        random_features(rng, ids, cols, 1.0),
        (0..ids as u32).collect(),
    )
    .unwrap();
    let gallery = EmbeddingBatch::new(
        random_features(rng, ids * 3, cols, 1.0),
        (0..ids * 3).map(|i| (i / 3) as u32).collect(),
    )
    .unwrap();
    let config = LossConfig::new(random_variant(rng))
        .with_margin(rng.random_range(0.2..=1.5))
        .with_lambda(rng.random_range(0.0..=1.0));
    Instance {
        batch,
        queries,
        gallery,
        config,
    }
}

fn transformed(
    batch: &EmbeddingBatch,
    f: impl Fn(usize, &Array2<f64>) -> Array1<f64>,
) -> EmbeddingBatch {
    let features = batch.features();
    let mut out = Array2::zeros(features.dim());
    for i in 0..features.nrows() {
        out.row_mut(i).assign(&f(i, features));
    }
    EmbeddingBatch::new(out, batch.labels().to_vec()).unwrap()
}

pub fn report_close(a: &RetrievalReport, b: &RetrievalReport, tol: f64) {
    assert!((a.map - b.map).abs() <= tol, "mAP {} vs {}", a.map, b.map);
    for (x, y) in a.cmc.iter().zip(b.cmc.iter()) {
        assert!((x - y).abs() <= tol, "CMC {x} vs {y}");
    }
    for (x, y) in a.per_query_ap.iter().zip(b.per_query_ap.iter()) {
        assert!((x - y).abs() <= tol, "AP {x} vs {y}");
    }
}

/// Builds a random orthogonal matrix by Gram-Schmidt on a Gaussian
/// draw, re-orthogonalizing once for numerical hygiene.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Array2<f64> {
    loop {
        let raw = random_features(rng, dim, dim, 1.0);
        let mut q = Array2::<f64>::zeros((dim, dim));
        let mut ok = true;
        for col in 0..dim {
            let mut v = raw.column(col).to_owned();
            for _ in 0..2 {
                for prev in 0..col {
                    let proj = v.dot(&q.column(prev));
                    v = &v - &(proj * &q.column(prev).to_owned());
                }
            }
            let norm = v.dot(&v).sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            q.column_mut(col).assign(&(v / norm));
        }
        if ok {
            return q;
        }
    }
}

/// Shifting every embedding by one constant vector must leave
/// distances, losses, and Euclidean retrieval untouched within 1e-10.
pub fn check_translation_invariance(rng: &mut ChaCha8Rng, round: usize) {
    let instance = random_instance(rng);
    let cols = instance.batch.dim();
    let shift = random_features(rng, 1, cols, 5.0);
    let translate =
        |batch: &EmbeddingBatch| transformed(batch, |i, feats| &feats.row(i) + &shift.row(0));

    let moved = translate(&instance.batch);
    let base = dca_distances(&instance.batch, instance.config.lambda).unwrap();
    let after = dca_distances(&moved, instance.config.lambda).unwrap();
    assert!(
        max_abs_diff(base.dist(), after.dist()) <= 1e-10,
        "round {round}"
    );
    assert!(
        max_abs_diff(base.jaccard(), after.jaccard()) <= 1e-10,
        "round {round}"
    );
    assert!(
        max_abs_diff(base.dca(), after.dca()) <= 1e-10,
        "round {round}"
    );

    let lv = loss_forward(&instance.batch, &instance.config).unwrap();
    let lm = loss_forward(&moved, &instance.config).unwrap();
    assert!((lv.value - lm.value).abs() <= 1e-10, "round {round}");
    assert_eq!(lv.active_count, lm.active_count, "round {round}");

    let rv = evaluate(
        &instance.queries,
        &instance.gallery,
        EvalMode::Euclidean,
        0.5,
    )
    .unwrap();
    let rm = evaluate(
        &translate(&instance.queries),
        &translate(&instance.gallery),
        EvalMode::Euclidean,
        0.5,
    )
    .unwrap();
    report_close(&rv, &rm, 1e-10);
}

/// Rotating every embedding by one orthogonal matrix must leave
/// distances, losses, and Euclidean retrieval unchanged within 1e-8.
pub fn check_rotation_invariance(rng: &mut ChaCha8Rng, round: usize) {
    let instance = random_instance(rng);
    let q = random_orthogonal(rng, instance.batch.dim());
    let rotate = |batch: &EmbeddingBatch| {
        let rotated = batch.features().dot(&q);
        EmbeddingBatch::new(rotated, batch.labels().to_vec()).unwrap()
    };

    let moved = rotate(&instance.batch);
    let base = dca_distances(&instance.batch, instance.config.lambda).unwrap();
    let after = dca_distances(&moved, instance.config.lambda).unwrap();
    assert!(
        max_abs_diff(base.dist(), after.dist()) <= 1e-8,
        "round {round}"
    );
    assert!(
        max_abs_diff(base.dca(), after.dca()) <= 1e-8,
        "round {round}"
    );

    let lv = loss_forward(&instance.batch, &instance.config).unwrap();
    let lm = loss_forward(&moved, &instance.config).unwrap();
    assert!((lv.value - lm.value).abs() <= 1e-8, "round {round}");

    let rv = evaluate(
        &instance.queries,
        &instance.gallery,
        EvalMode::Euclidean,
        0.5,
    )
    .unwrap();
    let rm = evaluate(
        &rotate(&instance.queries),
        &rotate(&instance.gallery),
        EvalMode::Euclidean,
        0.5,
    )
    .unwrap();
    report_close(&rv, &rm, 1e-8);
}

/// Relabelling batch rows by a permutation must permute every matrix
/// exactly, leave loss values bit-identical, and leave retrieval
/// reports bit-identical under gallery reordering.
pub fn check_permutation_equivariance(rng: &mut ChaCha8Rng, round: usize) {
    let instance = random_instance(rng);
    let n = instance.batch.len();
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let features = instance.batch.features();
    let permuted_features =
        Array2::from_shape_fn((n, instance.batch.dim()), |(i, k)| features[[perm[i], k]]);
    let permuted_labels: Vec<u32> = perm.iter().map(|&i| instance.batch.labels()[i]).collect();
    let permuted = EmbeddingBatch::new(permuted_features, permuted_labels).unwrap();

    let base = dca_distances(&instance.batch, instance.config.lambda).unwrap();
    let after = dca_distances(&permuted, instance.config.lambda).unwrap();
    for i in 0..n {
        for j in 0..n {
            assert_eq!(
                after.dist()[[i, j]],
                base.dist()[[perm[i], perm[j]]],
                "round {round}: distance ({i},{j})"
            );
            assert_eq!(
                after.jaccard()[[i, j]],
                base.jaccard()[[perm[i], perm[j]]],
                "round {round}: jaccard ({i},{j})"
            );
            assert_eq!(
                after.dca()[[i, j]],
                base.dca()[[perm[i], perm[j]]],
                "round {round}: blend ({i},{j})"
            );
        }
    }

    let lv = loss_forward(&instance.batch, &instance.config).unwrap();
    let lp = loss_forward(&permuted, &instance.config).unwrap();
    assert_eq!(lv.value, lp.value, "round {round}: loss value");
    assert_eq!(lv.active_count, lp.active_count, "round {round}");
    assert_eq!(lv.total_count, lp.total_count, "round {round}");

    let g = instance.gallery.len();
    let mut gperm: Vec<usize> = (0..g).collect();
    for i in (1..g).rev() {
        let j = rng.random_range(0..=i);
        gperm.swap(i, j);
    }
    let gfeats = instance.gallery.features();
    let gallery_permuted = EmbeddingBatch::new(
        Array2::from_shape_fn((g, instance.gallery.dim()), |(i, k)| gfeats[[gperm[i], k]]),
        gperm
            .iter()
            .map(|&i| instance.gallery.labels()[i])
            .collect(),
    )
    .unwrap();
    let rv = evaluate(
        &instance.queries,
        &instance.gallery,
        EvalMode::Euclidean,
        0.5,
    )
    .unwrap();
    let rp = evaluate(
        &instance.queries,
        &gallery_permuted,
        EvalMode::Euclidean,
        0.5,
    )
    .unwrap();
    assert_eq!(rv.map, rp.map, "round {round}: mAP under gallery shuffle");
    assert_eq!(rv.cmc, rp.cmc, "round {round}: CMC under gallery shuffle");
    assert_eq!(rv.per_query_ap, rp.per_query_ap, "round {round}");
}
