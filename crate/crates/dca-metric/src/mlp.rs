//! A small fully connected embedder: affine layers with ReLU between them,
//! an identity output layer, and an optional L2 normalization of the output
//! rows. Forward passes can cache every intermediate so the backward pass
//! computes parameter and input gradients without recomputation.
//!
//! Checkpoints are a fixed little-endian binary format (magic `DCAM`): layer
//! count, then per layer its dimensions, row-major weights, and biases. The
//! `normalize_output` flag is a runtime choice and is deliberately not part
//! of the format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DcaError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCAM";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Caps on checkpoint headers, guarding allocation against corrupt files.
const MAX_LAYERS: u32 = 4096;
const MAX_LAYER_DIM: u32 = 1 << 20;

/// One affine layer: `z = x W^T + b` with `weights` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

/// The embedder network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    /// When set, output rows are scaled to unit Euclidean norm (zero rows
    /// pass through unchanged). Not persisted in checkpoints.
    pub normalize_output: bool,
}

/// Intermediates of one cached forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input seen by each layer (the batch itself for layer 0).
    layer_inputs: Vec<Array2<f64>>,
    /// Affine output of each layer, before its activation.
    pre_activations: Vec<Array2<f64>>,
    /// Final network output.
    output: Array2<f64>,
    /// Row norms of the last affine output, when normalization is on.
    norms: Option<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    /// Affine outputs per layer, before activation — useful for inspecting
    /// how close hidden units sit to their rectifier corners.
    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre_activations
    }
}

/// Gradients of a scalar loss with respect to every parameter and the input.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub inputs: Array2<f64>,
}

impl MlpModel {
    /// Builds a network with the given layer widths (input width first,
    /// embedding width last; at least two entries, all positive). Weights
    /// use seeded He initialization — `N(0, sqrt(2 / fan_in))` — and biases
    /// start at zero, so equal seeds give bit-identical models.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(DcaError::invalid(format!(
                "network needs at least an input and an output width, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(DcaError::invalid(format!(
                "layer widths must be positive, got {widths:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std_dev = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std_dev).expect("finite std dev");
            let weights = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(&mut rng));
            layers.push(Layer {
                weights,
                biases: Array1::zeros(fan_out),
            });
        }
        Ok(Self {
            layers,
            normalize_output: false,
        })
    }

    /// Layer widths, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.layers.len() + 1);
        widths.push(self.input_dim());
        for layer in &self.layers {
            widths.push(layer.weights.nrows());
        }
        widths
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    /// Checks structural consistency: at least one layer, chained dimensions,
    /// bias lengths matching weight rows, and finite parameters.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DcaError::invalid("network has no layers"));
        }
        let mut expected_in: Option<usize> = None;
        for (idx, layer) in self.layers.iter().enumerate() {
            let (out_dim, in_dim) = layer.weights.dim();
            if out_dim == 0 || in_dim == 0 {
                return Err(DcaError::invalid(format!(
                    "layer {idx} has a zero dimension ({out_dim}x{in_dim})"
                )));
            }
            if layer.biases.len() != out_dim {
                return Err(DcaError::invalid(format!(
                    "layer {idx} bias length {} does not match its {out_dim} outputs",
                    layer.biases.len()
                )));
            }
            if let Some(expected) = expected_in {
                if in_dim != expected {
                    return Err(DcaError::invalid(format!(
                        "layer {idx} expects {in_dim} inputs but the previous layer emits {expected}"
                    )));
                }
            }
            if layer.weights.iter().any(|w| !w.is_finite())
                || layer.biases.iter().any(|b| !b.is_finite())
            {
                return Err(DcaError::invalid(format!(
                    "layer {idx} contains non-finite parameters"
                )));
            }
            expected_in = Some(out_dim);
        }
        Ok(())
    }

    /// Embeds a batch of rows. Errors if the input width does not match the
    /// first layer.
    pub fn forward(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(inputs)?.output)
    }

    /// Embeds a batch and captures every intermediate for [`Self::backward`].
    pub fn forward_cached(&self, inputs: &Array2<f64>) -> Result<MlpCache> {
        self.validate()?;
        if inputs.ncols() != self.input_dim() {
            return Err(DcaError::invalid(format!(
                "input has {} columns, network expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let count = self.layers.len();
        let mut layer_inputs = Vec::with_capacity(count);
        let mut pre_activations = Vec::with_capacity(count);
        let mut current = inputs.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let pre = current.dot(&layer.weights.t()) + &layer.biases;
            layer_inputs.push(current);
            current = if idx + 1 < count {
                pre.mapv(|z| z.max(0.0))
            } else {
                pre.clone()
            };
            pre_activations.push(pre);
        }
        let norms = if self.normalize_output {
            let norms: Vec<f64> = current
                .rows()
                .into_iter()
                .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            for (r, &norm) in norms.iter().enumerate() {
                if norm > 0.0 {
                    for v in current.row_mut(r) {
                        *v /= norm;
                    }
                }
            }
            Some(norms)
        } else {
            None
        };
        Ok(MlpCache {
            layer_inputs,
            pre_activations,
            output: current,
            norms,
        })
    }

    /// Backpropagates `upstream = dL/d(output)` through a cached forward
    /// pass, returning gradients for every weight matrix, every bias, and
    /// the input. ReLU uses the subgradient 0 at exactly zero.
    pub fn backward(&self, cache: &MlpCache, upstream: &Array2<f64>) -> Result<MlpGradients> {
        if cache.layer_inputs.len() != self.layers.len() {
            return Err(DcaError::invalid(
                "cache does not match the network's layer count",
            ));
        }
        if upstream.dim() != cache.output.dim() {
            return Err(DcaError::invalid(format!(
                "upstream gradient is {:?}, output was {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }

        // Undo the normalization first: for y = z / |z| the chain rule gives
        // dL/dz = (g - y (y . g)) / |z| per row; zero rows passed through
        // the forward unchanged, so they do here too.
        let mut delta = match &cache.norms {
            Some(norms) => {
                let mut d = upstream.clone();
                for (r, &norm) in norms.iter().enumerate() {
                    if norm > 0.0 {
                        let y = cache.output.row(r);
                        let g = upstream.row(r);
                        let projection: f64 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
                        for (col, slot) in d.row_mut(r).iter_mut().enumerate() {
                            *slot = (g[col] - y[col] * projection) / norm;
                        }
                    }
                }
                d
            }
            None => upstream.clone(),
        };

        let count = self.layers.len();
        let mut weight_grads = vec![Array2::zeros((0, 0)); count];
        let mut bias_grads = vec![Array1::zeros(0); count];
        for idx in (0..count).rev() {
            weight_grads[idx] = delta.t().dot(&cache.layer_inputs[idx]);
            bias_grads[idx] = delta.sum_axis(Axis(0));
            let propagated = delta.dot(&self.layers[idx].weights);
            delta = if idx > 0 {
                // Gate by the previous layer's ReLU: closed at z <= 0.
                let mut gated = propagated;
                gated.zip_mut_with(&cache.pre_activations[idx - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                gated
            } else {
                propagated
            };
        }
        Ok(MlpGradients {
            weights: weight_grads,
            biases: bias_grads,
            inputs: delta,
        })
    }
}

/// Writes a checkpoint. The byte stream is a pure function of the
/// parameters, so identical models serialize identically.
pub fn save_checkpoint(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    model.validate()?;
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(model.layers.len() as u32).to_le_bytes())?;
    for layer in &model.layers {
        let (out_dim, in_dim) = layer.weights.dim();
        w.write_all(&(in_dim as u32).to_le_bytes())?;
        w.write_all(&(out_dim as u32).to_le_bytes())?;
        for &value in layer.weights.iter() {
            w.write_all(&value.to_le_bytes())?;
        }
        for &value in layer.biases.iter() {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]. Wrong magic bytes, an
/// unsupported version, a short file, and trailing bytes are each rejected
/// with their own error. The loaded model has `normalize_output` off.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpModel> {
    const CTX: &str = "checkpoint";
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_ctx(&mut r, &mut magic, CTX)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(DcaError::BadMagic {
            context: CTX,
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = read_u16(&mut r, CTX)?;
    if version != CHECKPOINT_VERSION {
        return Err(DcaError::VersionMismatch {
            context: CTX,
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let layer_count = read_u32(&mut r, CTX)?;
    if layer_count == 0 || layer_count > MAX_LAYERS {
        return Err(DcaError::invalid(format!(
            "checkpoint declares {layer_count} layers, expected 1..={MAX_LAYERS}"
        )));
    }
    let mut layers = Vec::with_capacity(layer_count as usize);
    for idx in 0..layer_count {
        let in_dim = read_u32(&mut r, CTX)?;
        let out_dim = read_u32(&mut r, CTX)?;
        if in_dim == 0 || out_dim == 0 || in_dim > MAX_LAYER_DIM || out_dim > MAX_LAYER_DIM {
            return Err(DcaError::invalid(format!(
                "checkpoint layer {idx} declares implausible dimensions {out_dim}x{in_dim}"
            )));
        }
        let weight_count = in_dim as usize * out_dim as usize;
        let mut weights = Vec::with_capacity(weight_count);
        for _ in 0..weight_count {
            weights.push(read_f64(&mut r, CTX)?);
        }
        let mut biases = Vec::with_capacity(out_dim as usize);
        for _ in 0..out_dim {
            biases.push(read_f64(&mut r, CTX)?);
        }
        let weights = Array2::from_shape_vec((out_dim as usize, in_dim as usize), weights)
            .expect("shape matches element count");
        layers.push(Layer {
            weights,
            biases: Array1::from_vec(biases),
        });
    }
    let mut trailing = [0u8; 1];
    if read_count(&mut r, &mut trailing)? != 0 {
        return Err(DcaError::invalid(
            "checkpoint has trailing bytes after the last layer",
        ));
    }
    let model = MlpModel {
        layers,
        normalize_output: false,
    };
    model.validate()?;
    Ok(model)
}

/// Reads as many bytes as fit, returning how many arrived (0 at EOF).
pub(crate) fn read_count(r: &mut impl Read, buf: &mut [u8]) -> Result<usize> {
    let mut total = 0;
    while total < buf.len() {
        match r.read(&mut buf[total..]) {
            Ok(0) => break,
            Ok(n) => total += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(total)
}

/// `read_exact` that reports how many bytes were missing.
pub(crate) fn read_exact_ctx(
    r: &mut impl Read,
    buf: &mut [u8],
    context: &'static str,
) -> Result<()> {
    let got = read_count(r, buf)?;
    if got < buf.len() {
        return Err(DcaError::Truncated {
            context,
            missing: buf.len() - got,
        });
    }
    Ok(())
}

pub(crate) fn read_u16(r: &mut impl Read, context: &'static str) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact_ctx(r, &mut buf, context)?;
    Ok(u16::from_le_bytes(buf))
}

pub(crate) fn read_u32(r: &mut impl Read, context: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact_ctx(r, &mut buf, context)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64(r: &mut impl Read, context: &'static str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact_ctx(r, &mut buf, context)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64(r: &mut impl Read, context: &'static str) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact_ctx(r, &mut buf, context)?;
    Ok(f64::from_le_bytes(buf))
}
