//! Adam optimizer over the embedder's parameters.

use ndarray::{Array1, Array2};

use crate::error::{DcaError, Result};
use crate::mlp::{MlpGradients, MlpModel};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// First and second moment estimates for every parameter of one model,
/// together with the decay rates they were accumulated under.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m_weights: Vec<Array2<f64>>,
    v_weights: Vec<Array2<f64>>,
    m_biases: Vec<Array1<f64>>,
    v_biases: Vec<Array1<f64>>,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    /// Zero-initialized state with the standard decay rates (0.9, 0.999)
    /// and epsilon 1e-8.
    pub fn new(model: &MlpModel) -> Self {
        Self::with_hyperparameters(model, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON)
            .expect("default hyperparameters are valid")
    }

    /// Zero-initialized state with explicit decay rates in `[0, 1)` and a
    /// positive epsilon.
    pub fn with_hyperparameters(
        model: &MlpModel,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self> {
        for (name, beta) in [("beta1", beta1), ("beta2", beta2)] {
            if !beta.is_finite() || !(0.0..1.0).contains(&beta) {
                return Err(DcaError::invalid(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(DcaError::invalid(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self {
            step: 0,
            m_weights: model
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.dim()))
                .collect(),
            v_weights: model
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weights.dim()))
                .collect(),
            m_biases: model
                .layers
                .iter()
                .map(|l| Array1::zeros(l.biases.len()))
                .collect(),
            v_biases: model
                .layers
                .iter()
                .map(|l| Array1::zeros(l.biases.len()))
                .collect(),
            beta1,
            beta2,
            epsilon,
        })
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one bias-corrected Adam update in place:
///
/// ```text
/// m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// The learning rate must be positive and the gradient shapes must match the
/// model the state was created for. A single step from fresh state moves
/// each parameter by almost exactly `lr` (up to the epsilon), regardless of
/// the gradient's magnitude.
pub fn adam_step(
    model: &mut MlpModel,
    grads: &MlpGradients,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if !learning_rate.is_finite() || learning_rate <= 0.0 {
        return Err(DcaError::invalid(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    if grads.weights.len() != model.layers.len() || state.m_weights.len() != model.layers.len() {
        return Err(DcaError::invalid(
            "gradient or optimizer state does not match the model's layer count",
        ));
    }
    for (idx, layer) in model.layers.iter().enumerate() {
        if grads.weights[idx].dim() != layer.weights.dim()
            || grads.biases[idx].len() != layer.biases.len()
        {
            return Err(DcaError::invalid(format!(
                "gradient shapes for layer {idx} do not match the model"
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);

    for (idx, layer) in model.layers.iter_mut().enumerate() {
        update(
            layer.weights.iter_mut(),
            grads.weights[idx].iter(),
            state.m_weights[idx].iter_mut(),
            state.v_weights[idx].iter_mut(),
            (b1, b2, eps, bias1, bias2, learning_rate),
        );
        update(
            layer.biases.iter_mut(),
            grads.biases[idx].iter(),
            state.m_biases[idx].iter_mut(),
            state.v_biases[idx].iter_mut(),
            (b1, b2, eps, bias1, bias2, learning_rate),
        );
    }
    Ok(())
}

fn update<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    grads: impl Iterator<Item = &'a f64>,
    ms: impl Iterator<Item = &'a mut f64>,
    vs: impl Iterator<Item = &'a mut f64>,
    (b1, b2, eps, bias1, bias2, lr): (f64, f64, f64, f64, f64, f64),
) {
    for (((p, &g), m), v) in params.zip(grads).zip(ms).zip(vs) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
