//! Federator-side matching of slow clients to fast ones.
//!
//! Every selected client is estimated to need `ru·(t_123 + t_4)` more seconds.
//! Clients above the mean of those estimates (the mean compute time) are
//! *sending*; the rest are *receiving*. Each sending client, in ascending
//! order of its estimate, is paired with the receiving client that minimises
//!
//! ```text
//! ct · (1 + ln(S·f + 1))
//! ```
//!
//! where `ct` is the best pair completion estimate from [`calc_op`], `S` is
//! the pair's label-distribution distance and `f` the similarity factor. A
//! receiving client is used at most once per round.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiler::ClientProfile;
use crate::similarity::SimilarityMatrix;
use crate::ClientId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("cannot compute the mean compute time of zero clients")]
    NoProfiles,
    #[error("calc_op needs positive finite times, got t_a={t_a}, t_b={t_b}, x_b={x_b}")]
    InvalidTimes { t_a: f64, t_b: f64, x_b: f64 },
    #[error("calc_op needs at least one remaining update on both clients, got r_a={r_a}, r_b={r_b}")]
    InvalidUpdates { r_a: usize, r_b: usize },
    #[error("similarity factor must be finite and >= 0, got {0}")]
    InvalidSimilarityFactor(f64),
    #[error("no similarity entry for clients {0} and {1}")]
    MissingSimilarity(ClientId, ClientId),
    #[error("client {0} appears more than once in the profiles")]
    DuplicateClient(ClientId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffloadAssignment {
    pub weak_client: ClientId,
    pub strong_client: ClientId,
    /// Number of local updates whose feature-block training is handed to
    /// the strong client.
    pub offload_point: usize,
    /// Pair completion estimate returned by [`calc_op`].
    pub estimated_completion: f64,
    /// `estimated_completion` after the similarity penalty.
    pub adjusted_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffloadSchedule {
    pub round: usize,
    pub mct: f64,
    /// Ascending by estimate.
    pub sending: Vec<ClientId>,
    /// Descending by estimate.
    pub receiving: Vec<ClientId>,
    pub assignments: Vec<OffloadAssignment>,
}

impl OffloadSchedule {
    pub fn assignment_for_weak(&self, client: ClientId) -> Option<&OffloadAssignment> {
        self.assignments.iter().find(|a| a.weak_client == client)
    }

    pub fn assignment_for_strong(&self, client: ClientId) -> Option<&OffloadAssignment> {
        self.assignments.iter().find(|a| a.strong_client == client)
    }
}

pub fn mean_compute_time(profiles: &[ClientProfile]) -> Result<f64, SchedulerError> {
    if profiles.is_empty() {
        return Err(SchedulerError::NoProfiles);
    }
    let sum: f64 = profiles.iter().map(ClientProfile::estimated_remaining).sum();
    Ok(sum / profiles.len() as f64)
}

fn by_estimate_then_id(a: &ClientProfile, b: &ClientProfile) -> Ordering {
    a.estimated_remaining()
        .total_cmp(&b.estimated_remaining())
        .then(a.client_id.cmp(&b.client_id))
}

/// Splits clients around `mct`. Strictly above goes to sending; ties go to
/// receiving. Sending is sorted ascending by estimate, receiving descending,
/// both with ties broken by ascending client id.
pub fn partition_clients(profiles: &[ClientProfile], mct: f64) -> (Vec<ClientProfile>, Vec<ClientProfile>) {
    let (mut sending, mut receiving): (Vec<ClientProfile>, Vec<ClientProfile>) =
        profiles.iter().partition(|p| p.estimated_remaining() > mct);
    sending.sort_by(by_estimate_then_id);
    receiving.sort_by(|a, b| {
        b.estimated_remaining()
            .total_cmp(&a.estimated_remaining())
            .then(a.client_id.cmp(&b.client_id))
    });
    (sending, receiving)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffloadPoint {
    /// Estimated completion of the slower of the two clients.
    pub ct: f64,
    /// Offloaded updates.
    pub d: usize,
}

/// Completion estimate for offloading `d` updates from client a to client b.
pub fn offload_cost(t_a: f64, t_b: f64, x_b: f64, r_a: usize, r_b: usize, d: usize) -> f64 {
    let weak = (r_a - d) as f64 * t_a + d as f64 * x_b;
    let strong = (r_b - d) as f64 * t_b;
    weak.max(strong)
}

/// Scans `d = 1..=min(r_a, r_b)` and stops at the first increase in cost.
/// Returns the cost and the `d` that produced it.
pub fn calc_op(t_a: f64, t_b: f64, x_b: f64, r_a: usize, r_b: usize) -> Result<OffloadPoint, SchedulerError> {
    if ![t_a, t_b, x_b].iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(SchedulerError::InvalidTimes { t_a, t_b, x_b });
    }
    if r_a == 0 || r_b == 0 {
        return Err(SchedulerError::InvalidUpdates { r_a, r_b });
    }
    let mut best = OffloadPoint { ct: f64::INFINITY, d: 0 };
    for d in 1..=r_a.min(r_b) {
        let current = offload_cost(t_a, t_b, x_b, r_a, r_b, d);
        if current > best.ct {
            break;
        }
        best = OffloadPoint { ct: current, d };
    }
    Ok(best)
}

/// `ct · (1 + ln(S·f + 1))`.
pub fn similarity_adjusted_cost(ct: f64, similarity: f64, f: f64) -> f64 {
    ct * (1.0 + (similarity * f).ln_1p())
}

/// Greedy weak-to-strong matching for one round.
pub fn build_schedule(
    profiles: &[ClientProfile],
    similarity: &SimilarityMatrix,
    f: f64,
    round: usize,
) -> Result<OffloadSchedule, SchedulerError> {
    if !(f.is_finite() && f >= 0.0) {
        return Err(SchedulerError::InvalidSimilarityFactor(f));
    }
    let mut ids: Vec<ClientId> = profiles.iter().map(|p| p.client_id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(SchedulerError::DuplicateClient(w[0]));
    }
    let mct = mean_compute_time(profiles)?;
    let (sending, receiving) = partition_clients(profiles, mct);
    let mut schedule = OffloadSchedule {
        round,
        mct,
        sending: sending.iter().map(|p| p.client_id).collect(),
        receiving: receiving.iter().map(|p| p.client_id).collect(),
        assignments: Vec::new(),
    };

    let mut available = receiving;
    for weak in &sending {
        if available.is_empty() {
            break;
        }
        let mut best: Option<(usize, OffloadAssignment)> = None;
        for (idx, strong) in available.iter().enumerate() {
            // A client with nothing left to run cannot absorb offloaded work.
            if strong.remaining_updates == 0 || weak.remaining_updates == 0 {
                continue;
            }
            let point = calc_op(
                weak.timings.total(),
                strong.timings.total(),
                strong.timings.bf,
                weak.remaining_updates,
                strong.remaining_updates,
            )?;
            let s = similarity
                .between(weak.client_id, strong.client_id)
                .ok_or(SchedulerError::MissingSimilarity(weak.client_id, strong.client_id))?;
            let cost = similarity_adjusted_cost(point.ct, s, f);
            let better = match &best {
                None => true,
                Some((_, b)) => cost < b.adjusted_cost || (cost == b.adjusted_cost && strong.client_id < b.strong_client),
            };
            if better {
                best = Some((
                    idx,
                    OffloadAssignment {
                        weak_client: weak.client_id,
                        strong_client: strong.client_id,
                        offload_point: point.d,
                        estimated_completion: point.ct,
                        adjusted_cost: cost,
                    },
                ));
            }
        }
        if let Some((idx, assignment)) = best {
            available.remove(idx);
            schedule.assignments.push(assignment);
        }
    }
    Ok(schedule)
}
