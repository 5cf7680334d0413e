//! Two-block dense classifier used by every simulated client.
//!
//! The network is `softmax(tanh(x·W1 + b1)·W2 + b2)`. The first affine layer
//! plus its nonlinearity is the *feature block*; the output layer is the
//! *classifier block*. A training step is made of four phases:
//!
//! | phase | what runs                          |
//! |-------|------------------------------------|
//! | ff    | forward through the feature block  |
//! | fc    | forward through the classifier     |
//! | bc    | backward through the classifier    |
//! | bf    | backward through the feature block |
//!
//! Freezing the feature block skips `bf`, which is the phase that gets
//! offloaded to a faster client.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to this value before taking the log.
pub const PROB_EPSILON: f64 = 1e-12;

const CHECKPOINT_MAGIC: &[u8; 4] = b"AGMD";
const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 4 + 4 + 4 * 3 + 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("label {label} at row {row} is outside [0, {num_classes})")]
    InvalidLabel {
        row: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("batch must contain at least one sample")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("learning rate must be finite and >= 0, got {0}")]
    InvalidLearningRate(f64),
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn shape_err(context: &'static str, expected: impl ToString, actual: impl ToString) -> ModelError {
    ModelError::ShapeMismatch {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

/// An affine layer `x·W + b`, with `W` stored as `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..=bound));
        Self { weights, bias }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Weights (row-major) followed by bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }

    fn is_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    fn affine(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    fn same_shape(&self, other: &DenseLayer) -> bool {
        self.weights.dim() == other.weights.dim() && self.bias.len() == other.bias.len()
    }
}

/// The feature block, detached from its classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock(pub DenseLayer);

/// The classifier block, detached from its features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBlock(pub DenseLayer);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionedModel {
    pub feature: DenseLayer,
    pub classifier: DenseLayer,
    pub num_classes: usize,
}

/// A labelled minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self, ModelError> {
        if inputs.nrows() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if inputs.nrows() != labels.len() {
            return Err(shape_err("batch labels", inputs.nrows(), labels.len()));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrads {
    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    fn matches(&self, layer: &DenseLayer) -> bool {
        self.weights.dim() == layer.weights.dim() && self.bias.len() == layer.bias.len()
    }
}

/// Loss gradients. `feature` is `None` when the feature block is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub feature: Option<LayerGrads>,
    pub classifier: LayerGrads,
}

/// Activations kept from the forward pass for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `tanh` output of the feature block, `batch × hidden`.
    pub hidden: Array2<f64>,
    /// Softmax output, `batch × num_classes`.
    pub probs: Array2<f64>,
}

/// FedProx-style penalty `(mu/2)·||current − anchor||²`.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub mu: f64,
    pub anchor: &'a PartitionedModel,
    pub current: &'a PartitionedModel,
}

impl PartitionedModel {
    pub fn new(feature: DenseLayer, classifier: DenseLayer) -> Result<Self, ModelError> {
        if feature.fan_out() != classifier.fan_in() {
            return Err(shape_err(
                "feature output vs classifier input",
                feature.fan_out(),
                classifier.fan_in(),
            ));
        }
        if feature.bias.len() != feature.fan_out() || classifier.bias.len() != classifier.fan_out() {
            return Err(ModelError::InvalidDimensions("bias length differs from layer width".into()));
        }
        if classifier.fan_out() == 0 || feature.fan_in() == 0 || feature.fan_out() == 0 {
            return Err(ModelError::InvalidDimensions("all dimensions must be >= 1".into()));
        }
        if !feature.is_finite() || !classifier.is_finite() {
            return Err(ModelError::NonFinite("model weights"));
        }
        let num_classes = classifier.fan_out();
        Ok(Self {
            feature,
            classifier,
            num_classes,
        })
    }

    /// Seeded uniform initialisation.
    pub fn init(input_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Result<Self, ModelError> {
        if input_dim == 0 || hidden_dim == 0 || num_classes == 0 {
            return Err(ModelError::InvalidDimensions(format!(
                "input_dim={input_dim}, hidden_dim={hidden_dim}, num_classes={num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature = DenseLayer::uniform(input_dim, hidden_dim, &mut rng);
        let classifier = DenseLayer::uniform(hidden_dim, num_classes, &mut rng);
        Self::new(feature, classifier)
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self, ModelError> {
        Self::new(
            DenseLayer::zeros(input_dim, hidden_dim),
            DenseLayer::zeros(hidden_dim, num_classes),
        )
    }

    pub fn input_dim(&self) -> usize {
        self.feature.fan_in()
    }

    pub fn hidden_dim(&self) -> usize {
        self.feature.fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.feature.num_params() + self.classifier.num_params()
    }

    /// All parameters in checkpoint order.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.feature.params().chain(self.classifier.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.feature.params_mut().chain(self.classifier.params_mut())
    }

    pub fn same_shape(&self, other: &PartitionedModel) -> bool {
        self.feature.same_shape(&other.feature) && self.classifier.same_shape(&other.classifier)
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if batch.inputs.ncols() != self.input_dim() {
            return Err(shape_err("batch input dim", self.input_dim(), batch.inputs.ncols()));
        }
        if batch.inputs.nrows() != batch.labels.len() {
            return Err(shape_err("batch labels", batch.inputs.nrows(), batch.labels.len()));
        }
        if let Some((row, &label)) = batch.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(ModelError::InvalidLabel {
                row,
                label,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Feature map only (phase ff).
    pub fn features(&self, inputs: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        if inputs.ncols() != self.input_dim() {
            return Err(shape_err("input dim", self.input_dim(), inputs.ncols()));
        }
        Ok(self.feature.affine(inputs).mapv(f64::tanh))
    }

    /// Class probabilities for raw inputs (phases ff + fc).
    pub fn predict_proba(&self, inputs: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        let hidden = self.features(inputs)?;
        Ok(softmax_rows(self.classifier.affine(&hidden)))
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardPass, ModelError> {
        self.check_batch(batch)?;
        let hidden = self.features(&batch.inputs)?;
        let probs = softmax_rows(self.classifier.affine(&hidden));
        Ok(ForwardPass { hidden, probs })
    }

    /// Fraction of rows whose argmax matches the label.
    pub fn accuracy(&self, inputs: &Array2<f64>, labels: &[usize]) -> Result<f64, ModelError> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        if inputs.nrows() != labels.len() {
            return Err(shape_err("accuracy labels", inputs.nrows(), labels.len()));
        }
        let probs = self.predict_proba(inputs)?;
        let correct = probs
            .outer_iter()
            .zip(labels)
            .filter(|(row, &label)| argmax(row.iter().copied()) == label)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Gradients for both blocks (phases ff, fc, bc, bf).
    pub fn backward_full(&self, batch: &Batch) -> Result<Gradients, ModelError> {
        let pass = self.forward(batch)?;
        let (classifier, d_logits) = self.classifier_backward(batch, &pass);
        // bf: through W2 and tanh into W1.
        let d_hidden = d_logits.dot(&self.classifier.weights.t());
        let d_pre = d_hidden * pass.hidden.mapv(|h| 1.0 - h * h);
        let feature = LayerGrads {
            weights: batch.inputs.t().dot(&d_pre),
            bias: d_pre.sum_axis(Axis(0)),
        };
        Ok(Gradients {
            feature: Some(feature),
            classifier,
        })
    }

    /// Classifier gradients only; the bf phase is never executed.
    pub fn backward_frozen(&self, batch: &Batch) -> Result<Gradients, ModelError> {
        let pass = self.forward(batch)?;
        let (classifier, _) = self.classifier_backward(batch, &pass);
        Ok(Gradients {
            feature: None,
            classifier,
        })
    }

    fn classifier_backward(&self, batch: &Batch, pass: &ForwardPass) -> (LayerGrads, Array2<f64>) {
        let n = batch.len() as f64;
        let mut d_logits = pass.probs.clone();
        for (mut row, &label) in d_logits.outer_iter_mut().zip(&batch.labels) {
            row[label] -= 1.0;
        }
        d_logits.mapv_inplace(|v| v / n);
        let grads = LayerGrads {
            weights: pass.hidden.t().dot(&d_logits),
            bias: d_logits.sum_axis(Axis(0)),
        };
        (grads, d_logits)
    }

    /// Adds `mu·(self − anchor)` to each present gradient block.
    pub fn add_proximal_gradient(&self, grads: &mut Gradients, mu: f64, anchor: &PartitionedModel) -> Result<(), ModelError> {
        if !self.same_shape(anchor) {
            return Err(shape_err("proximal anchor", "same shape as model", "different shape"));
        }
        if mu == 0.0 {
            return Ok(());
        }
        if let Some(fg) = grads.feature.as_mut() {
            fg.weights.zip_mut_with(&(&self.feature.weights - &anchor.feature.weights), |g, d| *g += mu * d);
            fg.bias.zip_mut_with(&(&self.feature.bias - &anchor.feature.bias), |g, d| *g += mu * d);
        }
        let cg = &mut grads.classifier;
        cg.weights.zip_mut_with(&(&self.classifier.weights - &anchor.classifier.weights), |g, d| *g += mu * d);
        cg.bias.zip_mut_with(&(&self.classifier.bias - &anchor.classifier.bias), |g, d| *g += mu * d);
        Ok(())
    }

    /// Returns the updated model; see [`PartitionedModel::apply_sgd`].
    pub fn sgd_step(&self, grads: &Gradients, lr: f64) -> Result<PartitionedModel, ModelError> {
        let mut next = self.clone();
        next.apply_sgd(grads, lr)?;
        Ok(next)
    }

    /// `w ← w − lr·g` for every present block. Absent blocks are untouched.
    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) -> Result<(), ModelError> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(ModelError::InvalidLearningRate(lr));
        }
        if !grads.classifier.matches(&self.classifier) {
            return Err(shape_err("classifier gradients", "model shape", "different shape"));
        }
        if let Some(fg) = &grads.feature {
            if !fg.matches(&self.feature) {
                return Err(shape_err("feature gradients", "model shape", "different shape"));
            }
            if !fg.is_finite() {
                return Err(ModelError::NonFinite("feature gradients"));
            }
        }
        if !grads.classifier.is_finite() {
            return Err(ModelError::NonFinite("classifier gradients"));
        }
        if let Some(fg) = &grads.feature {
            step(&mut self.feature, fg, lr);
        }
        step(&mut self.classifier, &grads.classifier, lr);
        Ok(())
    }

    pub fn split(&self) -> (FeatureBlock, ClassifierBlock) {
        (FeatureBlock(self.feature.clone()), ClassifierBlock(self.classifier.clone()))
    }

    /// Pure recombination of two blocks; no arithmetic on the weights.
    pub fn merge(feature: FeatureBlock, classifier: ClassifierBlock) -> Result<PartitionedModel, ModelError> {
        Self::new(feature.0, classifier.0)
    }

    /// Binary checkpoint, all integers and floats little-endian:
    ///
    /// ```text
    /// offset  size  field
    ///      0     4  magic "AGMD"
    ///      4     4  version (u32) = 1
    ///      8     4  input_dim (u32)
    ///     12     4  hidden_dim (u32)
    ///     16     4  num_classes (u32)
    ///     20     8  seed (u64)
    ///     28   8*n  parameters (f64): W1 row-major, b1, W2 row-major, b2
    /// ```
    pub fn to_checkpoint_bytes(&self, seed: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 8 * self.num_params());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for dim in [self.input_dim(), self.hidden_dim(), self.num_classes] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&seed.to_le_bytes());
        for v in self.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`PartitionedModel::to_checkpoint_bytes`]; returns the model and its seed.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(PartitionedModel, u64), ModelError> {
        let err = |msg: &str| ModelError::Checkpoint(msg.to_string());
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(err("truncated header"));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
        if u32_at(4) != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {}", u32_at(4))));
        }
        let (input_dim, hidden_dim, num_classes) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let seed = u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
        let mut model = Self::zeros(input_dim, hidden_dim, num_classes).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let body = &bytes[CHECKPOINT_HEADER_LEN..];
        if body.len() != 8 * model.num_params() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * model.num_params(),
                body.len()
            )));
        }
        for (slot, chunk) in model.params_mut().zip(body.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        if !model.params().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("checkpoint parameters"));
        }
        Ok((model, seed))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

fn step(layer: &mut DenseLayer, grads: &LayerGrads, lr: f64) {
    layer.weights.zip_mut_with(&grads.weights, |w, g| *w -= lr * g);
    layer.bias.zip_mut_with(&grads.bias, |w, g| *w -= lr * g);
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    logits
}

/// Mean negative log-likelihood of `labels` under `probs`, plus the proximal
/// penalty when one is supplied.
pub fn loss_cross_entropy(probs: &Array2<f64>, labels: &[usize], proximal: Option<Proximal<'_>>) -> Result<f64, ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if probs.nrows() != labels.len() {
        return Err(shape_err("loss labels", probs.nrows(), labels.len()));
    }
    let mut nll = 0.0;
    for (row, (&label, p)) in labels.iter().zip(probs.outer_iter()).enumerate() {
        if label >= p.len() {
            return Err(ModelError::InvalidLabel {
                row,
                label,
                num_classes: p.len(),
            });
        }
        nll -= p[label].max(PROB_EPSILON).ln();
    }
    let mut loss = nll / labels.len() as f64;
    if let Some(prox) = proximal {
        if !prox.current.same_shape(prox.anchor) {
            return Err(shape_err("proximal anchor", "same shape as model", "different shape"));
        }
        let sq: f64 = prox
            .current
            .params()
            .zip(prox.anchor.params())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        loss += 0.5 * prox.mu * sq;
    }
    Ok(loss)
}

/// Index of the largest value; the first one wins on ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
