//! Adapting a trained model to a speaker from a small batch of frames.
//!
//! Four interchangeable methods: the learned meta-learner (`META`), plain
//! gradient descent on every weight (`ALL`), per-unit hidden scaling
//! (`LHUC`), and a square linear transform after one hidden layer
//! (`LINEAR`). The overlay methods never modify the base weights.

mod overlay;

use serde::{Deserialize, Serialize};

pub use overlay::{load_overlay, save_overlay, LhucParams, LinearTransformParams, Overlay};

use crate::error::{Error, Result};
use crate::meta_learner::{unroll, InputVariant, MetaParams, Unroll};
use crate::nn_core::{
    backward, backward_with_overlay, forward_with_overlay, predict_labels, FrameBatch,
    HiddenOverlay, Matrix, ModelSpec, OverlayGrad, ParameterVector,
};

/// Default SGD schedule for adapting every weight: 3 full-batch steps at 0.01.
pub const ALL_DEFAULT_LR: f64 = 0.01;
/// Default LHUC schedule: 3 full-batch steps at 0.7.
pub const LHUC_DEFAULT_LR: f64 = 0.7;
pub const DEFAULT_EPOCHS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptMethod {
    Meta,
    All,
    Lhuc,
    Linear,
}

/// Method plus its schedule.
#[derive(Clone, Copy, Debug)]
pub enum AdaptMethodConfig<'a> {
    Meta {
        params: &'a MetaParams,
        steps: usize,
    },
    All {
        learning_rate: f64,
        epochs: usize,
    },
    Lhuc {
        learning_rate: f64,
        epochs: usize,
    },
    Linear {
        learning_rate: f64,
        epochs: usize,
        layer: usize,
    },
}

impl AdaptMethodConfig<'_> {
    pub fn method(&self) -> AdaptMethod {
        match self {
            AdaptMethodConfig::Meta { .. } => AdaptMethod::Meta,
            AdaptMethodConfig::All { .. } => AdaptMethod::All,
            AdaptMethodConfig::Lhuc { .. } => AdaptMethod::Lhuc,
            AdaptMethodConfig::Linear { .. } => AdaptMethod::Linear,
        }
    }
}

/// The middle hidden layer, where the linear transform goes by default.
pub fn default_linear_layer(spec: &ModelSpec) -> usize {
    (spec.hidden_dims.len() - 1) / 2
}

/// Adapted weights, or base weights plus an overlay.
#[derive(Clone, Debug, PartialEq)]
pub enum AdaptedModel {
    Weights(ParameterVector),
    Lhuc {
        base: ParameterVector,
        lhuc: LhucParams,
    },
    Linear {
        base: ParameterVector,
        linear: LinearTransformParams,
    },
}

impl AdaptedModel {
    /// Weights used in the forward pass (the base for overlay methods).
    pub fn theta(&self) -> &ParameterVector {
        match self {
            AdaptedModel::Weights(t) => t,
            AdaptedModel::Lhuc { base, .. } | AdaptedModel::Linear { base, .. } => base,
        }
    }

    pub fn overlay(&self) -> HiddenOverlay<'_> {
        match self {
            AdaptedModel::Weights(_) => HiddenOverlay::None,
            AdaptedModel::Lhuc { lhuc, .. } => lhuc.as_overlay(),
            AdaptedModel::Linear { linear, .. } => linear.as_overlay(),
        }
    }

    pub fn forward(&self, spec: &ModelSpec, features: &Matrix) -> Result<Matrix> {
        forward_with_overlay(spec, self.theta(), features, self.overlay())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptResult {
    pub adapted: AdaptedModel,
    /// Adaptation-batch loss before each step.
    pub step_losses: Vec<f64>,
}

fn check_batch(spec: &ModelSpec, theta: &ParameterVector, batch: &FrameBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::NoAdaptationFrames);
    }
    theta.check_matches(spec)?;
    batch.check_labels(spec.num_classes)
}

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::Precondition(
            "adaptation needs at least one step".into(),
        ));
    }
    Ok(())
}

fn finite_loss(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("adaptation loss at step {step}")))
    }
}

/// Dispatches to the method-specific routine.
pub fn adapt(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
    cfg: &AdaptMethodConfig<'_>,
) -> Result<AdaptResult> {
    match *cfg {
        AdaptMethodConfig::Meta { params, steps } => meta_adapt(spec, theta, batch, params, steps),
        AdaptMethodConfig::All {
            learning_rate,
            epochs,
        } => sgd_adapt_all(spec, theta, batch, learning_rate, epochs),
        AdaptMethodConfig::Lhuc {
            learning_rate,
            epochs,
        } => lhuc_adapt(spec, theta, batch, learning_rate, epochs),
        AdaptMethodConfig::Linear {
            learning_rate,
            epochs,
            layer,
        } => linear_adapt(spec, theta, batch, learning_rate, epochs, layer),
    }
}

/// Runs the meta-learner for `steps` full-batch steps and keeps the trace.
pub fn meta_unroll(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
    meta: &MetaParams,
    steps: usize,
) -> Result<Unroll> {
    check_batch(spec, theta, batch)?;
    check_steps(steps)?;
    let positions = match meta.variant() {
        InputVariant::Position => theta.normalized_positions(),
        InputVariant::Value => Vec::new(),
    };
    let mut current = theta.clone();
    unroll(meta, theta.values(), &positions, steps, |t, values| {
        current.values_mut().copy_from_slice(values);
        let (loss, grad) = backward(spec, &current, batch)?;
        Ok((finite_loss(loss, t)?, grad.into_values()))
    })
}

/// Meta-learner adaptation: each step computes the batch loss and gradient
/// at the current weights and feeds them through the meta-learner.
pub fn meta_adapt(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
    meta: &MetaParams,
    steps: usize,
) -> Result<AdaptResult> {
    let un = meta_unroll(spec, theta, batch, meta, steps)?;
    let step_losses = un.losses();
    Ok(AdaptResult {
        adapted: AdaptedModel::Weights(theta.with_values(un.theta_final)?),
        step_losses,
    })
}

/// Full-batch gradient descent on every weight, one step per epoch.
pub fn sgd_adapt_all(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
    learning_rate: f64,
    epochs: usize,
) -> Result<AdaptResult> {
    check_batch(spec, theta, batch)?;
    check_steps(epochs)?;
    let mut current = theta.clone();
    let mut step_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (loss, grad) = backward(spec, &current, batch)?;
        step_losses.push(finite_loss(loss, epoch)?);
        for (w, g) in current.values_mut().iter_mut().zip(grad.values()) {
            *w -= learning_rate * g;
        }
    }
    Ok(AdaptResult {
        adapted: AdaptedModel::Weights(current),
        step_losses,
    })
}

/// Full-batch gradient descent on per-unit multipliers of every hidden layer.
pub fn lhuc_adapt(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
    learning_rate: f64,
    epochs: usize,
) -> Result<AdaptResult> {
    check_batch(spec, theta, batch)?;
    check_steps(epochs)?;
    let mut lhuc = LhucParams::ones(spec);
    let mut step_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let out = backward_with_overlay(spec, theta, batch, lhuc.as_overlay(), false)?;
        step_losses.push(finite_loss(out.loss, epoch)?);
        if let OverlayGrad::Scale(grad) = out.overlay {
            for (r, g) in lhuc.r.iter_mut().zip(&grad) {
                for (rv, gv) in r.iter_mut().zip(g) {
                    *rv -= learning_rate * gv;
                }
            }
        }
    }
    Ok(AdaptResult {
        adapted: AdaptedModel::Lhuc {
            base: theta.clone(),
            lhuc,
        },
        step_losses,
    })
}

/// Full-batch gradient descent on a square transform inserted after hidden
/// layer `layer`, initialised to the identity.
pub fn linear_adapt(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
    learning_rate: f64,
    epochs: usize,
    layer: usize,
) -> Result<AdaptResult> {
    check_batch(spec, theta, batch)?;
    check_steps(epochs)?;
    let mut linear = LinearTransformParams::identity(spec, layer)?;
    let mut step_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let out = backward_with_overlay(spec, theta, batch, linear.as_overlay(), false)?;
        step_losses.push(finite_loss(out.loss, epoch)?);
        if let OverlayGrad::Linear(grad) = out.overlay {
            for (a, g) in linear.a.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *a -= learning_rate * g;
            }
        }
    }
    Ok(AdaptResult {
        adapted: AdaptedModel::Linear {
            base: theta.clone(),
            linear,
        },
        step_losses,
    })
}

/// Frame-level pseudo-labels from the unadapted model (argmax, lowest index
/// on ties).
pub fn pseudo_labels(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
) -> Result<FrameBatch> {
    let labels = predict_labels(spec, theta, &batch.features)?;
    batch.with_labels(labels)
}
