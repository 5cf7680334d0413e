//! Independent reference implementations used by several test targets.
#![allow(dead_code)]

use aergia_core::config::{ExperimentConfig, PartitionKind, StrategyEntry, StrategySpec};
use aergia_core::model::PartitionedModel;
use aergia_core::profiler::{ClientProfile, PhaseTimings};
use aergia_core::ClientId;

/// Pair completion estimate for offloading `d` batches, written out from
/// the definition rather than shared with the library.
pub fn pair_cost(t_a: f64, t_b: f64, x_b: f64, r_a: usize, r_b: usize, d: usize) -> f64 {
    let weak_side = t_a * (r_a - d) as f64 + x_b * d as f64;
    let strong_side = t_b * (r_b - d) as f64;
    if weak_side >= strong_side {
        weak_side
    } else {
        strong_side
    }
}

/// Every candidate cost, index 0 ↔ d = 1.
pub fn all_costs(t_a: f64, t_b: f64, x_b: f64, r_a: usize, r_b: usize) -> Vec<f64> {
    (1..=r_a.min(r_b)).map(|d| pair_cost(t_a, t_b, x_b, r_a, r_b, d)).collect()
}

/// Global minimum over all `d`; among equal minima the largest `d`, which
/// is where a scan that only stops on a strict increase ends up.
pub fn brute_force_op(t_a: f64, t_b: f64, x_b: f64, r_a: usize, r_b: usize) -> (f64, usize) {
    let costs = all_costs(t_a, t_b, x_b, r_a, r_b);
    let mut best = (f64::INFINITY, 0);
    for (i, &c) in costs.iter().enumerate() {
        if c <= best.0 {
            best = (c, i + 1);
        }
    }
    best
}

/// Non-increasing then non-decreasing.
pub fn is_unimodal(costs: &[f64]) -> bool {
    let mut rising = false;
    for w in costs.windows(2) {
        if w[1] > w[0] {
            rising = true;
        } else if w[1] < w[0] && rising {
            return false;
        }
    }
    true
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// L1 distance between normalised histograms as an exact reduced fraction.
pub fn exact_l1(a: &[u64], b: &[u64]) -> (u128, u128) {
    let ta: u128 = a.iter().map(|&v| v as u128).sum();
    let tb: u128 = b.iter().map(|&v| v as u128).sum();
    let num: u128 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as u128 * tb).abs_diff(y as u128 * ta))
        .sum();
    let den = ta * tb;
    let g = gcd(num, den).max(1);
    (num / g, den / g)
}

/// `p ≤ q + r` for fractions, by cross-multiplication.
pub fn frac_le_sum(p: (u128, u128), q: (u128, u128), r: (u128, u128)) -> bool {
    // p.0/p.1 ≤ (q.0·r.1 + r.0·q.1) / (q.1·r.1)
    p.0 * q.1 * r.1 <= (q.0 * r.1 + r.0 * q.1) * p.1
}

/// Class probabilities for one input row, with nothing but scalar loops
/// over the raw weights.
pub fn loop_probs(model: &PartitionedModel, x: &[f64]) -> Vec<f64> {
    let w1 = &model.feature.weights;
    let b1 = &model.feature.bias;
    let w2 = &model.classifier.weights;
    let b2 = &model.classifier.bias;
    let (d, h) = (w1.nrows(), w1.ncols());
    let c = w2.ncols();
    let mut hidden = vec![0.0; h];
    for j in 0..h {
        let mut s = b1[j];
        for i in 0..d {
            s += x[i] * w1[[i, j]];
        }
        hidden[j] = s.tanh();
    }
    let mut logits = vec![0.0; c];
    for k in 0..c {
        let mut s = b2[k];
        for j in 0..h {
            s += hidden[j] * w2[[j, k]];
        }
        logits[k] = s;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    logits.iter().map(|l| (l - max).exp() / z).collect()
}

/// Mean cross-entropy over `(inputs, labels)` built on [`loop_probs`].
pub fn loop_loss(model: &PartitionedModel, inputs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = inputs
        .iter()
        .zip(labels)
        .map(|(x, &y)| -loop_probs(model, x)[y].max(1e-12).ln())
        .sum();
    total / labels.len() as f64
}

pub fn profile(id: ClientId, per_batch: f64, bf_share: f64, ru: usize) -> ClientProfile {
    let rest = per_batch * (1.0 - bf_share) / 3.0;
    ClientProfile {
        client_id: id,
        timings: PhaseTimings {
            ff: rest,
            fc: rest,
            bc: rest,
            bf: per_batch * bf_share,
        },
        remaining_updates: ru,
    }
}

/// Desk-scale experiment with the given strategies and partition.
pub fn experiment(rounds: usize, mode: PartitionKind, k: usize, strategies: Vec<StrategyEntry>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.rounds = rounds;
    cfg.partition.mode = mode;
    cfg.partition.classes_per_client = k;
    cfg.strategies = strategies;
    cfg
}

pub fn aergia(name: &str, f: f64) -> StrategyEntry {
    StrategyEntry::named(
        name,
        StrategySpec::Aergia {
            f: Some(f),
            profile_batches: None,
            profile_noise: None,
        },
    )
}
