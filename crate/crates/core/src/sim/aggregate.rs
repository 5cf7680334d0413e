use thiserror::Error;

use crate::model::{ClassifierBlock, FeatureBlock, ModelError, PartitionedModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("nothing to aggregate")]
    Empty,
    #[error("{models} models but {weights} weights")]
    LengthMismatch { models: usize, weights: usize },
    #[error("model {0} has a different shape from model 0")]
    ShapeMismatch(usize),
    #[error("dataset sizes must sum to a positive value")]
    ZeroWeight,
    #[error("client {0} reported zero local steps")]
    ZeroSteps(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check(models: &[PartitionedModel], sizes: &[usize]) -> Result<f64, AggregateError> {
    if models.is_empty() {
        return Err(AggregateError::Empty);
    }
    if models.len() != sizes.len() {
        return Err(AggregateError::LengthMismatch {
            models: models.len(),
            weights: sizes.len(),
        });
    }
    if let Some(i) = models.iter().position(|m| !m.same_shape(&models[0])) {
        return Err(AggregateError::ShapeMismatch(i));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(AggregateError::ZeroWeight);
    }
    Ok(total as f64)
}

/// `Σ_k (n_k / Σn) · w_k`, element-wise.
pub fn aggregate_fedavg(models: &[PartitionedModel], sizes: &[usize]) -> Result<PartitionedModel, AggregateError> {
    let total = check(models, sizes)?;
    let mut out = models[0].clone();
    for v in out.params_mut() {
        *v = 0.0;
    }
    for (model, &n) in models.iter().zip(sizes) {
        let p = n as f64 / total;
        for (acc, w) in out.params_mut().zip(model.params()) {
            *acc += p * w;
        }
    }
    Ok(out)
}

/// Normalised averaging: `w + (Σ p_k τ_k) · Σ p_k (w_k − w) / τ_k`.
pub fn aggregate_fednova(
    global: &PartitionedModel,
    models: &[PartitionedModel],
    sizes: &[usize],
    steps: &[usize],
) -> Result<PartitionedModel, AggregateError> {
    let total = check(models, sizes)?;
    if steps.len() != models.len() {
        return Err(AggregateError::LengthMismatch {
            models: models.len(),
            weights: steps.len(),
        });
    }
    if let Some(i) = steps.iter().position(|&t| t == 0) {
        return Err(AggregateError::ZeroSteps(i));
    }
    if !global.same_shape(&models[0]) {
        return Err(AggregateError::ShapeMismatch(0));
    }
    // With a common τ the normalisation cancels algebraically; take the
    // closed form so the result matches plain averaging bit for bit.
    if steps.iter().all(|&t| t == steps[0]) {
        return aggregate_fedavg(models, sizes);
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total).collect();
    let tau_eff: f64 = weights.iter().zip(steps).map(|(p, &t)| p * t as f64).sum();

    let mut direction = vec![0.0; global.num_params()];
    for ((model, p), &tau) in models.iter().zip(&weights).zip(steps) {
        for ((acc, w), g) in direction.iter_mut().zip(model.params()).zip(global.params()) {
            *acc += p * (w - g) / tau as f64;
        }
    }
    let mut out = global.clone();
    for (v, d) in out.params_mut().zip(direction) {
        *v += tau_eff * d;
    }
    Ok(out)
}

/// Feature block trained by the strong client, classifier from the weak one.
pub fn recombine(feature_from_strong: FeatureBlock, classifier_from_weak: ClassifierBlock) -> Result<PartitionedModel, AggregateError> {
    Ok(PartitionedModel::merge(feature_from_strong, classifier_from_weak)?)
}
