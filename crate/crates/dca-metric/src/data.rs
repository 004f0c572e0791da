//! Labelled datasets: synthetic generation, a binary on-disk format, CSV
//! import, and query/gallery splitting.
//!
//! The binary format (magic `DCAE`) stores, little-endian: a u16 version,
//! the row count as u64, the feature width as u32, the features row-major as
//! f64, then one u32 label per row. Reads and writes round-trip bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::EmbeddingBatch;
use crate::error::{DcaError, Result};
use crate::mlp::{read_count, read_exact_ctx, read_f64, read_u16, read_u32, read_u64};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"DCAE";
pub const EMBEDDING_VERSION: u16 = 1;

/// Caps on file headers, guarding allocation against corrupt files.
const MAX_ROWS: u64 = 1 << 24;
const MAX_COLS: u32 = 1 << 20;
const MAX_ELEMENTS: u64 = 1 << 27;

/// A labelled feature table: one row and one u32 identity label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<u32>,
}

impl Dataset {
    /// Validates and wraps a feature matrix with labels: at least one row,
    /// at least one column, one label per row, finite features.
    pub fn new(features: Array2<f64>, labels: Vec<u32>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(DcaError::invalid("dataset needs at least one row"));
        }
        if features.ncols() == 0 {
            return Err(DcaError::invalid(
                "dataset needs at least one feature column",
            ));
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

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of distinct labels.
    pub fn identity_count(&self) -> usize {
        let mut seen: Vec<u32> = self.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// The whole dataset as a compute batch (requires at least two rows).
    pub fn batch(&self) -> Result<EmbeddingBatch> {
        EmbeddingBatch::new(self.features.clone(), self.labels.clone())
    }

    /// Gathers the given rows (with repeats allowed) into a new feature
    /// matrix and label vector. Errors on an out-of-range index.
    pub fn select(&self, indices: &[usize]) -> Result<(Array2<f64>, Vec<u32>)> {
        let mut features = Array2::zeros((indices.len(), self.dim()));
        let mut labels = Vec::with_capacity(indices.len());
        for (slot, &idx) in indices.iter().enumerate() {
            if idx >= self.len() {
                return Err(DcaError::invalid(format!(
                    "row index {idx} out of range for {} rows",
                    self.len()
                )));
            }
            features.row_mut(slot).assign(&self.features.row(idx));
            labels.push(self.labels[idx]);
        }
        Ok((features, labels))
    }
}

/// Parameters of the synthetic cluster generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    /// Number of identities (clusters); at least 2.
    pub identities: usize,
    /// Samples drawn per identity; at least 2.
    pub samples_per_identity: usize,
    /// Feature dimensionality; at least 1.
    pub input_dim: usize,
    /// Minimum centroid separation, in units of the noise sigma.
    pub separation: f64,
    /// Standard deviation of the isotropic per-sample noise.
    pub noise_sigma: f64,
    /// Seed for the generator's random stream.
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(
        identities: usize,
        samples_per_identity: usize,
        input_dim: usize,
        separation: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if identities < 2 {
            return Err(DcaError::invalid(format!(
                "need at least 2 identities, got {identities}"
            )));
        }
        if samples_per_identity < 2 {
            return Err(DcaError::invalid(format!(
                "need at least 2 samples per identity, got {samples_per_identity}"
            )));
        }
        if input_dim == 0 {
            return Err(DcaError::invalid("input dimension must be positive"));
        }
        if !separation.is_finite() || separation <= 0.0 {
            return Err(DcaError::invalid(format!(
                "separation must be positive, got {separation}"
            )));
        }
        if !noise_sigma.is_finite() || noise_sigma <= 0.0 {
            return Err(DcaError::invalid(format!(
                "noise sigma must be positive, got {noise_sigma}"
            )));
        }
        Ok(Self {
            identities,
            samples_per_identity,
            input_dim,
            separation,
            noise_sigma,
            seed,
        })
    }
}

/// Generates a clustered dataset: one Gaussian centroid per identity, scaled
/// so the minimum pairwise centroid distance equals `separation * noise_sigma`
/// exactly (up to rounding), then `samples_per_identity` noisy samples per
/// centroid. Rows are grouped by identity with labels `0..identities`. The
/// draw is fully determined by the seed.
pub fn generate(spec: &SynthSpec) -> Dataset {
    generate_parts(spec).0
}

/// Generator core, additionally returning the scaled centroids so tests can
/// verify the separation guarantee directly.
fn generate_parts(spec: &SynthSpec) -> (Dataset, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let c = spec.identities;
    let dim = spec.input_dim;

    // Draw centroids until the minimum pairwise distance is positive (a tie
    // at zero has probability zero but would make scaling meaningless).
    let (centroids, min_dist) = loop {
        let candidates = Array2::from_shape_fn((c, dim), |_| normal.sample(&mut rng));
        let mut min_dist = f64::INFINITY;
        for i in 0..c {
            for j in (i + 1)..c {
                let sq: f64 = (0..dim)
                    .map(|k| {
                        let diff = candidates[[i, k]] - candidates[[j, k]];
                        diff * diff
                    })
                    .sum();
                min_dist = min_dist.min(sq.sqrt());
            }
        }
        if min_dist > 0.0 {
            break (candidates, min_dist);
        }
    };
    let scale = spec.separation * spec.noise_sigma / min_dist;

    let scaled = centroids.mapv(|v| v * scale);
    let rows = c * spec.samples_per_identity;
    let mut features = Array2::zeros((rows, dim));
    let mut labels = Vec::with_capacity(rows);
    let mut row = 0;
    for identity in 0..c {
        for _ in 0..spec.samples_per_identity {
            for k in 0..dim {
                features[[row, k]] =
                    scaled[[identity, k]] + spec.noise_sigma * normal.sample(&mut rng);
            }
            labels.push(identity as u32);
            row += 1;
        }
    }
    (Dataset { features, labels }, scaled)
}

/// Splits a dataset into queries (the first `queries_per_identity` rows of
/// each identity, in dataset order) and a gallery (the rest).
///
/// Every identity must keep at least one gallery sample and contribute at
/// least one query, so each identity needs strictly more samples than
/// `queries_per_identity`; the error names the first identity that falls
/// short.
pub fn split_queries(data: &Dataset, queries_per_identity: usize) -> Result<(Dataset, Dataset)> {
    if queries_per_identity == 0 {
        return Err(DcaError::invalid("queries per identity must be positive"));
    }
    let mut counts: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    for &label in &data.labels {
        *counts.entry(label).or_insert(0) += 1;
    }
    for (&label, &count) in &counts {
        if count <= queries_per_identity {
            return Err(DcaError::invalid(format!(
                "identity {label} has {count} sample(s); the split needs more than {queries_per_identity}"
            )));
        }
    }
    let mut taken: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
    let mut query_rows = Vec::new();
    let mut gallery_rows = Vec::new();
    for (idx, &label) in data.labels.iter().enumerate() {
        let seen = taken.entry(label).or_insert(0);
        if *seen < queries_per_identity {
            query_rows.push(idx);
            *seen += 1;
        } else {
            gallery_rows.push(idx);
        }
    }
    let (qf, ql) = data.select(&query_rows)?;
    let (gf, gl) = data.select(&gallery_rows)?;
    Ok((Dataset::new(qf, ql)?, Dataset::new(gf, gl)?))
}

/// Writes a dataset in the binary embedding format. The byte stream is a
/// pure function of the dataset, so equal datasets produce equal files.
pub fn write_embeddings(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(&(data.dim() as u32).to_le_bytes())?;
    for &value in data.features.iter() {
        w.write_all(&value.to_le_bytes())?;
    }
    for &label in &data.labels {
        w.write_all(&label.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_embeddings`]. Wrong magic bytes, an
/// unsupported version, a short file, and trailing bytes are each rejected
/// with their own error.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Dataset> {
    const CTX: &str = "embedding file";
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_ctx(&mut r, &mut magic, CTX)?;
    if magic != EMBEDDING_MAGIC {
        return Err(DcaError::BadMagic {
            context: CTX,
            expected: EMBEDDING_MAGIC,
            found: magic,
        });
    }
    let version = read_u16(&mut r, CTX)?;
    if version != EMBEDDING_VERSION {
        return Err(DcaError::VersionMismatch {
            context: CTX,
            expected: EMBEDDING_VERSION,
            found: version,
        });
    }
    let rows = read_u64(&mut r, CTX)?;
    let cols = read_u32(&mut r, CTX)?;
    if rows == 0 || rows > MAX_ROWS || cols == 0 || cols > MAX_COLS {
        return Err(DcaError::invalid(format!(
            "embedding file declares implausible shape {rows}x{cols}"
        )));
    }
    if rows * cols as u64 > MAX_ELEMENTS {
        return Err(DcaError::invalid(format!(
            "embedding file declares {rows}x{cols} values, beyond the supported size"
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(read_f64(&mut r, CTX)?);
    }
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(read_u32(&mut r, CTX)?);
    }
    let mut trailing = [0u8; 1];
    if read_count(&mut r, &mut trailing)? != 0 {
        return Err(DcaError::invalid(
            "embedding file has trailing bytes after the labels",
        ));
    }
    let features =
        Array2::from_shape_vec((rows, cols), values).expect("shape matches element count");
    Dataset::new(features, labels)
}

/// Imports a dataset from CSV with header `label,f0,f1,...`. Lines starting
/// with `#` (the configuration echo this toolkit writes into its own CSV
/// artifacts) and blank lines are skipped. Errors name the offending line.
pub fn read_csv_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut header_seen = false;
    let mut dim = 0usize;
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = line_no + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if !header_seen {
            if fields.first() != Some(&"label") || fields.len() < 2 {
                return Err(DcaError::invalid(format!(
                    "line {line_no}: expected header 'label,f0,f1,...', got '{trimmed}'"
                )));
            }
            for (idx, field) in fields[1..].iter().enumerate() {
                if *field != format!("f{idx}") {
                    return Err(DcaError::invalid(format!(
                        "line {line_no}: feature column {} should be named 'f{idx}'",
                        idx + 1
                    )));
                }
            }
            dim = fields.len() - 1;
            header_seen = true;
            continue;
        }
        if fields.len() != dim + 1 {
            return Err(DcaError::invalid(format!(
                "line {line_no}: expected {} fields, got {}",
                dim + 1,
                fields.len()
            )));
        }
        let label: u32 = fields[0]
            .parse()
            .map_err(|_| DcaError::invalid(format!("line {line_no}: bad label '{}'", fields[0])))?;
        labels.push(label);
        for field in &fields[1..] {
            let value: f64 = field.parse().map_err(|_| {
                DcaError::invalid(format!("line {line_no}: bad feature value '{field}'"))
            })?;
            values.push(value);
        }
    }
    if !header_seen {
        return Err(DcaError::invalid("CSV has no header line"));
    }
    if labels.is_empty() {
        return Err(DcaError::invalid("CSV has a header but no data rows"));
    }
    let features =
        Array2::from_shape_vec((labels.len(), dim), values).expect("shape matches element count");
    Dataset::new(features, labels)
}
