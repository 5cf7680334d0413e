use serde::{Deserialize, Serialize};

use crate::profiler::ClientProfile;
use crate::scheduler::OffloadSchedule;
use crate::ClientId;

/// Batches a client's model went through in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkRecord {
    pub client: ClientId,
    /// Four-phase batches run by the client itself.
    pub full_batches: usize,
    /// Classifier-only batches run after freezing.
    pub frozen_batches: usize,
    /// Feature-block batches run on this client's behalf by its helper.
    pub offloaded_batches: usize,
    /// Feature-block batches this client ran for a weak client.
    pub hosted_batches: usize,
}

impl WorkRecord {
    pub fn new(client: ClientId) -> Self {
        Self {
            client,
            full_batches: 0,
            frozen_batches: 0,
            offloaded_batches: 0,
            hosted_batches: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Virtual time at which the round started.
    pub start_time: f64,
    /// Virtual seconds until the federator closed the round.
    pub duration: f64,
    pub selected: Vec<ClientId>,
    /// Seconds after round start at which each aggregated client's model
    /// was complete at the federator.
    pub completion_times: Vec<(ClientId, f64)>,
    /// Test accuracy of the aggregated global model.
    pub accuracy: f64,
    pub dropped: Vec<ClientId>,
    /// Sum of dataset sizes of aggregated contributions.
    pub aggregated_weight: usize,
    pub profiles: Vec<ClientProfile>,
    pub schedule: Option<OffloadSchedule>,
    pub work: Vec<WorkRecord>,
}

impl RoundTrace {
    pub fn num_offloads(&self) -> usize {
        self.schedule.as_ref().map_or(0, |s| s.assignments.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub rounds: usize,
    pub total_time: f64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub mean_round_duration: f64,
    pub sd_round_duration: f64,
    pub median_round_duration: f64,
    pub total_offloads: usize,
    pub total_dropped: usize,
}

impl ExperimentSummary {
    pub fn from_traces(traces: &[RoundTrace]) -> Self {
        let durations: Vec<f64> = traces.iter().map(|t| t.duration).collect();
        let n = durations.len();
        let total_time: f64 = durations.iter().sum();
        let mean = if n == 0 { 0.0 } else { total_time / n as f64 };
        let sd = if n < 2 {
            0.0
        } else {
            (durations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            rounds: n,
            total_time,
            final_accuracy: traces.last().map_or(0.0, |t| t.accuracy),
            best_accuracy: traces.iter().map(|t| t.accuracy).fold(0.0, f64::max),
            mean_round_duration: mean,
            sd_round_duration: sd,
            median_round_duration: median(&durations),
            total_offloads: traces.iter().map(RoundTrace::num_offloads).sum(),
            total_dropped: traces.iter().map(|t| t.dropped.len()).sum(),
        }
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub label: String,
    pub seed: u64,
    pub traces: Vec<RoundTrace>,
    pub summary: ExperimentSummary,
}
