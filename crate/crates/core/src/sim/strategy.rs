use serde::{Deserialize, Serialize};

/// Round protocol and aggregation rule, with resolved parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    FedAvg,
    /// Profile, schedule, freeze and offload.
    Aergia {
        similarity_factor: f64,
        profile_batches: usize,
        profile_noise: f64,
    },
    /// Drop clients that miss `multiplier × mean estimated completion`.
    Deadline { multiplier: f64 },
    /// Static speed tiers, one tier per round in round-robin order.
    Tifl { tiers: usize },
    /// FedAvg with a proximal term pulling local models toward the global one.
    FedProx { mu: f64 },
    /// Aggregation normalised by each client's local step count.
    FedNova,
}

impl Strategy {
    pub fn kind(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::Aergia { .. } => "aergia",
            Strategy::Deadline { .. } => "deadline",
            Strategy::Tifl { .. } => "tifl",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::FedNova => "fednova",
        }
    }
}
