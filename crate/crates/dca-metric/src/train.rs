//! The training loop: P×K batch sampling, embedding, loss backward, and
//! Adam updates under a step-decay learning-rate schedule.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::EmbeddingBatch;
use crate::data::Dataset;
use crate::error::{DcaError, Result};
use crate::grad::loss_backward;
use crate::loss::LossConfig;
use crate::mining::{pk_sample, PkSpec};
use crate::mlp::MlpModel;
use crate::optim::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};

/// Everything a training run needs besides the model and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of optimization steps (one sampled batch each).
    pub steps: usize,
    /// Base learning rate.
    pub learning_rate: f64,
    /// `(step, factor)` pairs: from `step` onward the rate is multiplied by
    /// `factor`. Must be strictly increasing in `step`.
    pub decay_milestones: Vec<(usize, f64)>,
    /// Adam decay rates.
    pub adam_betas: (f64, f64),
    /// Run seed (model initialization is the caller's, but recorded configs
    /// carry this so a run is reproducible end to end).
    pub seed: u64,
    pub loss: LossConfig,
    pub pk: PkSpec,
}

impl TrainConfig {
    /// Desk-scale defaults: 300 steps at 1e-3 with tenfold decays at 55% and
    /// 80% of the run, standard Adam betas, and the sampler's seed as the
    /// run seed.
    pub fn new(loss: LossConfig, pk: PkSpec) -> Self {
        let steps = 300;
        Self {
            steps,
            learning_rate: 1e-3,
            decay_milestones: default_milestones(steps),
            adam_betas: (DEFAULT_BETA1, DEFAULT_BETA2),
            seed: pk.seed,
            loss,
            pk,
        }
    }

    /// Sets the step count and rebuilds the default milestones for it.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self.decay_milestones = default_milestones(steps);
        self
    }

    pub fn with_learning_rate(mut self, learning_rate: f64) -> Self {
        self.learning_rate = learning_rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DcaError::invalid("training needs at least one step"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(DcaError::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let mut previous: Option<usize> = None;
        for &(step, factor) in &self.decay_milestones {
            if let Some(prev) = previous {
                if step <= prev {
                    return Err(DcaError::invalid(
                        "decay milestones must be strictly increasing",
                    ));
                }
            }
            if !factor.is_finite() || factor <= 0.0 {
                return Err(DcaError::invalid(format!(
                    "decay factor must be positive, got {factor}"
                )));
            }
            previous = Some(step);
        }
        self.loss.validate()
    }
}

/// The standard schedule: tenfold decays at 55% and 80% of the run (the
/// canonical long-run schedule decays at steps 220 and 320 of 400).
/// Milestones that collapse onto the same step merge their factors; a
/// milestone at step 0 (possible only for tiny runs) is dropped.
pub fn default_milestones(steps: usize) -> Vec<(usize, f64)> {
    let mut milestones: Vec<(usize, f64)> = Vec::new();
    for at in [steps * 55 / 100, steps * 4 / 5] {
        if at == 0 {
            continue;
        }
        match milestones.last_mut() {
            Some((prev, factor)) if *prev == at => *factor *= 0.1,
            _ => milestones.push((at, 0.1)),
        }
    }
    milestones
}

/// The learning rate in effect at a given step under `config`'s schedule.
pub fn learning_rate_at(config: &TrainConfig, step: usize) -> f64 {
    let mut rate = config.learning_rate;
    for &(at, factor) in &config.decay_milestones {
        if step >= at {
            rate *= factor;
        }
    }
    rate
}

/// A finished run: the trained model and the per-step loss values.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: MlpModel,
    pub loss_history: Vec<f64>,
}

/// Trains `model` on `data` for `config.steps` steps. Each step samples a
/// P×K batch (seeded by `config.pk.seed`, so equal configurations replay the
/// same batch sequence), embeds it, backpropagates the configured loss, and
/// applies one Adam update at the scheduled rate.
///
/// The run is fully deterministic: equal data, model, and configuration give
/// a bit-identical model and loss history.
pub fn train(data: &Dataset, model: MlpModel, config: &TrainConfig) -> Result<TrainResult> {
    config.validate()?;
    model.validate()?;
    if data.dim() != model.input_dim() {
        return Err(DcaError::invalid(format!(
            "data has {} features but the model expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.pk.seed);
    let mut state = AdamState::with_hyperparameters(
        &model,
        config.adam_betas.0,
        config.adam_betas.1,
        DEFAULT_EPSILON,
    )?;
    let mut loss_history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let indices = pk_sample(&data.labels, &config.pk, &mut rng)?;
        let (features, labels) = data.select(&indices)?;
        let cache = model.forward_cached(&features)?;
        let batch = EmbeddingBatch::new(cache.output().clone(), labels)?;
        let buffer = loss_backward(&batch, &config.loss)?;
        loss_history.push(buffer.loss.value);
        let grads = model.backward(&cache, &buffer.grad)?;
        adam_step(
            &mut model,
            &grads,
            &mut state,
            learning_rate_at(config, step),
        )?;
    }
    Ok(TrainResult {
        model,
        loss_history,
    })
}

/// Convenience for callers that only need embeddings: runs the model over a
/// whole dataset and pairs the output with the dataset's labels.
pub fn embed_dataset(model: &MlpModel, data: &Dataset) -> Result<Dataset> {
    if data.dim() != model.input_dim() {
        return Err(DcaError::invalid(format!(
            "data has {} features but the model expects {}",
            data.dim(),
            model.input_dim()
        )));
    }
    let embedded: Array2<f64> = model.forward(&data.features)?;
    Dataset::new(embedded, data.labels.clone())
}
