//! Synthetic classification data and its IID / label-skewed split across clients.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Batch;
use crate::ClientId;

/// Number of times class choices are redrawn before a non-IID partition is
/// declared infeasible.
pub const MAX_CLASS_REDRAWS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("infeasible partition after {attempts} class redraws: {detail}")]
    Infeasible { attempts: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Standard deviation of the isotropic Gaussian around each class mean.
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// 80 % of every class, sorted.
    pub train_indices: Vec<usize>,
    /// The remaining 20 %, sorted.
    pub test_indices: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let inputs = self.inputs.select(ndarray::Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch { inputs, labels }
    }

    pub fn test_batch(&self) -> Batch {
        self.batch(&self.test_indices)
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

/// Class `c` is centred on the base-`b` digits of `c`, one digit per input
/// coordinate, where `b` is the smallest base giving every class its own
/// grid point. Neighbouring means are one unit apart.
pub fn class_mean(class: usize, num_classes: usize, input_dim: usize) -> Vec<f64> {
    let base = grid_base(num_classes, input_dim);
    let mut rest = class;
    (0..input_dim)
        .map(|_| {
            let digit = rest % base;
            rest /= base;
            digit as f64
        })
        .collect()
}

fn grid_base(num_classes: usize, input_dim: usize) -> usize {
    let mut base = 2usize;
    while (base as f64).powi(input_dim.min(64) as i32) < num_classes as f64 {
        base += 1;
    }
    base
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset, PartitionError> {
    if spec.num_classes == 0 || spec.samples_per_class == 0 || spec.input_dim == 0 {
        return Err(PartitionError::InvalidParameter(
            "num_classes, samples_per_class and input_dim must be >= 1".into(),
        ));
    }
    if !(spec.noise.is_finite() && spec.noise >= 0.0) {
        return Err(PartitionError::InvalidParameter(format!("noise must be >= 0, got {}", spec.noise)));
    }
    let n = spec.num_classes * spec.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut inputs = Array2::zeros((n, spec.input_dim));
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.num_classes {
        let mean = class_mean(class, spec.num_classes, spec.input_dim);
        for s in 0..spec.samples_per_class {
            let row = class * spec.samples_per_class + s;
            for (j, m) in mean.iter().enumerate() {
                let z: f64 = normal.sample(&mut rng);
                inputs[[row, j]] = m + spec.noise * z;
            }
            labels.push(class);
        }
    }

    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for class in 0..spec.num_classes {
        let mut idx: Vec<usize> = (class * spec.samples_per_class..(class + 1) * spec.samples_per_class).collect();
        idx.shuffle(&mut rng);
        let n_train = ((spec.samples_per_class as f64) * 0.8).round().max(1.0) as usize;
        test_indices.extend_from_slice(&idx[n_train..]);
        idx.truncate(n_train);
        train_indices.extend(idx);
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();

    Ok(Dataset {
        inputs,
        labels,
        num_classes: spec.num_classes,
        train_indices,
        test_indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionMode {
    Iid,
    /// Every client holds exactly this many classes.
    NonIid(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PartitionSizes {
    Equal { per_client: usize },
    /// `total` training samples split in proportion to `weights`.
    Proportional { weights: Vec<f64>, total: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: ClientId,
    /// Sorted dataset row indices owned by this client.
    pub sample_indices: Vec<usize>,
    pub class_counts: Vec<u64>,
}

impl ClientPartition {
    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }
}

/// Serializable per-client summary for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifestEntry {
    pub client_id: ClientId,
    pub size: usize,
    pub class_counts: Vec<u64>,
}

pub fn manifest(partitions: &[ClientPartition]) -> Vec<PartitionManifestEntry> {
    partitions
        .iter()
        .map(|p| PartitionManifestEntry {
            client_id: p.client_id,
            size: p.len(),
            class_counts: p.class_counts.clone(),
        })
        .collect()
}

fn client_sizes(sizes: &PartitionSizes, num_clients: usize) -> Result<Vec<usize>, PartitionError> {
    match sizes {
        PartitionSizes::Equal { per_client } => {
            if *per_client == 0 {
                return Err(PartitionError::InvalidParameter("per_client must be >= 1".into()));
            }
            Ok(vec![*per_client; num_clients])
        }
        PartitionSizes::Proportional { weights, total } => {
            if weights.len() != num_clients {
                return Err(PartitionError::InvalidParameter(format!(
                    "{} proportions given for {num_clients} clients",
                    weights.len()
                )));
            }
            if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
                return Err(PartitionError::InvalidParameter("proportions must be positive".into()));
            }
            let sum: f64 = weights.iter().sum();
            Ok(largest_remainder(weights.iter().map(|w| w / sum * *total as f64)))
        }
    }
}

/// Rounds non-negative reals to integers that sum to the rounded total,
/// giving leftover units to the largest fractional parts (ties: lowest index).
fn largest_remainder(shares: impl Iterator<Item = f64>) -> Vec<usize> {
    let shares: Vec<f64> = shares.collect();
    let total = shares.iter().sum::<f64>().round() as usize;
    let mut out: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Splits the training subset of `dataset` across `num_clients` clients.
pub fn partition(
    dataset: &Dataset,
    num_clients: usize,
    mode: PartitionMode,
    sizes: &PartitionSizes,
    seed: u64,
) -> Result<Vec<ClientPartition>, PartitionError> {
    let c = dataset.num_classes;
    if num_clients == 0 {
        return Err(PartitionError::InvalidParameter("num_clients must be >= 1".into()));
    }
    if let PartitionMode::NonIid(k) = mode {
        if k == 0 || k > c {
            return Err(PartitionError::InvalidParameter(format!(
                "classes per client must be in [1, {c}], got {k}"
            )));
        }
    }
    let sizes = client_sizes(sizes, num_clients)?;
    if sizes.contains(&0) {
        return Err(PartitionError::InvalidParameter("every client needs at least one sample".into()));
    }
    let total: usize = sizes.iter().sum();
    if total > dataset.train_indices.len() {
        return Err(PartitionError::InvalidParameter(format!(
            "requested {total} samples but the training split has {}",
            dataset.train_indices.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for &i in &dataset.train_indices {
        pools[dataset.labels[i]].push(i);
    }
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }
    let available: Vec<usize> = pools.iter().map(Vec::len).collect();

    // demand[client][class]
    let demand: Vec<Vec<usize>> = match mode {
        PartitionMode::Iid => {
            let n_train = dataset.train_indices.len() as f64;
            let demand: Vec<Vec<usize>> = sizes
                .iter()
                .map(|&size| largest_remainder(available.iter().map(|&a| a as f64 / n_train * size as f64)))
                .collect();
            check_supply(&demand, &available).map_err(|detail| PartitionError::Infeasible { attempts: 0, detail })?;
            demand
        }
        PartitionMode::NonIid(k) => {
            // A client smaller than k cannot hold k non-empty classes.
            if sizes.iter().any(|&s| s < k) {
                return Err(PartitionError::InvalidParameter(format!(
                    "clients need at least {k} samples to hold {k} classes"
                )));
            }
            let classes: Vec<usize> = (0..c).collect();
            let mut attempt = 0;
            loop {
                let demand: Vec<Vec<usize>> = sizes
                    .iter()
                    .map(|&size| {
                        let mut chosen: Vec<usize> = classes.choose_multiple(&mut rng, k).copied().collect();
                        chosen.sort_unstable();
                        let mut row = vec![0usize; c];
                        for (j, &class) in chosen.iter().enumerate() {
                            row[class] = size / k + usize::from(j < size % k);
                        }
                        row
                    })
                    .collect();
                match check_supply(&demand, &available) {
                    Ok(()) => break demand,
                    Err(detail) => {
                        attempt += 1;
                        if attempt >= MAX_CLASS_REDRAWS {
                            return Err(PartitionError::Infeasible { attempts: attempt, detail });
                        }
                    }
                }
            }
        }
    };

    // Deal each class pool round-robin over the clients still demanding it.
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (class, pool) in pools.iter().enumerate() {
        let mut remaining: Vec<usize> = demand.iter().map(|row| row[class]).collect();
        let mut next = pool.iter();
        while remaining.iter().any(|&r| r > 0) {
            for (client, r) in remaining.iter_mut().enumerate() {
                if *r > 0 {
                    owned[client].push(*next.next().expect("supply checked"));
                    *r -= 1;
                }
            }
        }
    }

    Ok(owned
        .into_iter()
        .enumerate()
        .map(|(client, mut sample_indices)| {
            sample_indices.sort_unstable();
            let class_counts = dataset.class_counts(&sample_indices);
            ClientPartition {
                client_id: client as ClientId,
                sample_indices,
                class_counts,
            }
        })
        .collect())
}

fn check_supply(demand: &[Vec<usize>], available: &[usize]) -> Result<(), String> {
    let mut totals: BTreeMap<usize, usize> = BTreeMap::new();
    for row in demand {
        for (class, &d) in row.iter().enumerate() {
            *totals.entry(class).or_default() += d;
        }
    }
    for (class, need) in totals {
        if need > available[class] {
            return Err(format!("class {class} needs {need} samples, only {} available", available[class]));
        }
    }
    Ok(())
}
