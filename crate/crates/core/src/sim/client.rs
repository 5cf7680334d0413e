use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ClientPartition, Dataset};
use crate::model::{Batch, ClassifierBlock, FeatureBlock, Gradients, ModelError, PartitionedModel};
use crate::profiler::PhaseTimings;
use crate::ClientId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// All four phases; both blocks are updated.
    Full,
    /// Feature block frozen; the bf phase is skipped.
    Frozen,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions<'a> {
    pub lr: f64,
    /// Proximal strength and the model local weights are pulled toward.
    pub proximal: Option<(f64, &'a PartitionedModel)>,
}

impl TrainOptions<'_> {
    pub fn plain(lr: f64) -> Self {
        Self { lr, proximal: None }
    }
}

/// One simulated device: its data, speed and minibatch stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: ClientId,
    pub speed_factor: f64,
    /// Ground-truth per-batch phase costs.
    pub timings: PhaseTimings,
    pub partition: ClientPartition,
    /// Working copy of the model for the current round.
    pub model: PartitionedModel,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ClientState {
    pub fn new(
        client_id: ClientId,
        speed_factor: f64,
        timings: PhaseTimings,
        partition: ClientPartition,
        model: PartitionedModel,
        batch_size: usize,
        shuffle_seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let mut order = partition.sample_indices.clone();
        order.shuffle(&mut rng);
        Self {
            client_id,
            speed_factor,
            timings,
            partition,
            model,
            batch_size: batch_size.max(1),
            order,
            cursor: 0,
            rng,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.partition.len()
    }

    /// Next minibatch, reshuffling at every epoch boundary. Clients holding
    /// fewer samples than the batch size train on all of them.
    pub fn next_batch(&mut self, data: &Dataset) -> Batch {
        let size = self.batch_size.min(self.order.len());
        let mut rows = Vec::with_capacity(size);
        while rows.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            rows.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        data.batch(&rows)
    }

    /// Virtual seconds for `updates` batches in `mode`.
    pub fn train_time(&self, updates: usize, mode: TrainMode) -> f64 {
        let per_batch = match mode {
            TrainMode::Full => self.timings.total(),
            TrainMode::Frozen => self.timings.frozen(),
        };
        updates as f64 * per_batch
    }

    /// Runs `updates` SGD steps on `self.model` and returns the virtual time
    /// they take.
    pub fn local_train(&mut self, data: &Dataset, updates: usize, mode: TrainMode, opts: &TrainOptions<'_>) -> Result<f64, ModelError> {
        for _ in 0..updates {
            let batch = self.next_batch(data);
            let mut grads = match mode {
                TrainMode::Full => self.model.backward_full(&batch)?,
                TrainMode::Frozen => self.model.backward_frozen(&batch)?,
            };
            if let Some((mu, anchor)) = opts.proximal {
                self.model.add_proximal_gradient(&mut grads, mu, anchor)?;
            }
            self.model.apply_sgd(&grads, opts.lr)?;
        }
        Ok(self.train_time(updates, mode))
    }
}

/// Trains a weak client's feature block on the strong client's data.
///
/// The forward pass uses the weak client's classifier snapshot, which stays
/// fixed; only the feature block is updated. The strong client's own model
/// is not touched. Time is `batches × strong.bf`.
pub fn execute_offloaded(
    strong: &mut ClientState,
    data: &Dataset,
    feature: FeatureBlock,
    classifier_snapshot: &ClassifierBlock,
    batches: usize,
    lr: f64,
) -> Result<(FeatureBlock, f64), ModelError> {
    let mut model = PartitionedModel::merge(feature, classifier_snapshot.clone())?;
    for _ in 0..batches {
        let batch = strong.next_batch(data);
        let full = model.backward_full(&batch)?;
        let grads = Gradients {
            feature: full.feature,
            classifier: zero_like(&full.classifier),
        };
        model.apply_sgd(&grads, lr)?;
    }
    let (trained, _) = model.split();
    Ok((trained, batches as f64 * strong.timings.bf))
}

fn zero_like(g: &crate::model::LayerGrads) -> crate::model::LayerGrads {
    crate::model::LayerGrads {
        weights: ndarray::Array2::zeros(g.weights.raw_dim()),
        bias: ndarray::Array1::zeros(g.bias.len()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition, PartitionMode, PartitionSizes, SyntheticSpec};

    fn setup() -> (Dataset, ClientPartition) {
        let ds = generate_synthetic(&SyntheticSpec {
            num_classes: 3,
            samples_per_class: 40,
            input_dim: 2,
            noise: 0.2,
            seed: 11,
        })
        .unwrap();
        let part = partition(&ds, 1, PartitionMode::Iid, &PartitionSizes::Equal { per_client: 60 }, 2)
            .unwrap()
            .remove(0);
        (ds, part)
    }

    fn client(part: &ClientPartition, speed: f64) -> ClientState {
        let timings = crate::profiler::ground_truth_timings(&PhaseTimings::default_profile(), speed).unwrap();
        ClientState::new(0, speed, timings, part.clone(), PartitionedModel::init(2, 4, 3, 5).unwrap(), 8, 99)
    }

    #[test]
    fn zero_updates_change_nothing() {
        let (ds, part) = setup();
        let mut c = client(&part, 1.0);
        let before = c.model.clone();
        let t = c.local_train(&ds, 0, TrainMode::Full, &TrainOptions::plain(0.1)).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(c.model, before);
    }

    #[test]
    fn frozen_training_keeps_features() {
        let (ds, part) = setup();
        let mut c = client(&part, 1.0);
        let before = c.model.feature.clone();
        c.local_train(&ds, 25, TrainMode::Frozen, &TrainOptions::plain(0.5)).unwrap();
        assert_eq!(c.model.feature, before);
    }

    #[test]
    fn full_mode_time_is_updates_times_batch() {
        let (ds, part) = setup();
        let mut c = client(&part, 0.5);
        let t = c.local_train(&ds, 10, TrainMode::Full, &TrainOptions::plain(0.1)).unwrap();
        assert!((t - 20.0).abs() < 1e-12);
    }

    #[test]
    fn batches_cycle_through_all_samples() {
        let (ds, part) = setup();
        let mut c = client(&part, 1.0);
        let mut seen = std::collections::BTreeMap::new();
        // 60 samples, batch 8: 15 batches = exactly two epochs.
        for _ in 0..15 {
            let b = c.next_batch(&ds);
            for row in b.inputs.outer_iter() {
                *seen.entry(format!("{row:?}")).or_insert(0) += 1;
            }
        }
        assert_eq!(seen.len(), 60);
        assert!(seen.values().all(|&n| n == 2));
    }

    #[test]
    fn offloaded_zero_batches_is_identity() {
        let (ds, part) = setup();
        let mut strong = client(&part, 1.0);
        let m = PartitionedModel::init(2, 4, 3, 1).unwrap();
        let (f, c) = m.split();
        let (out, t) = execute_offloaded(&mut strong, &ds, f.clone(), &c, 0, 0.1).unwrap();
        assert_eq!(out, f);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn offloaded_time_uses_strong_bf() {
        let (ds, part) = setup();
        let base = PhaseTimings::new(0.2, 0.1, 0.2, 0.5).unwrap();
        let mut strong = client(&part, 1.0);
        strong.timings = base;
        let m = PartitionedModel::init(2, 4, 3, 1).unwrap();
        let (f, c) = m.split();
        let own_before = strong.model.clone();
        let (_, t) = execute_offloaded(&mut strong, &ds, f, &c, 10, 0.1).unwrap();
        assert!((t - 5.0).abs() < 1e-12);
        assert_eq!(strong.model, own_before);
    }
}
