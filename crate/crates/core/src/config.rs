//! Experiment configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! See `docs/config.md` for the full schema.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PartitionMode, PartitionSizes, SyntheticSpec};
use crate::profiler::PhaseTimings;
use crate::sim::Strategy;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Parse(String),
    Invalid(Vec<FieldError>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse(msg) => write!(f, "could not parse config: {msg}"),
            ConfigError::Invalid(errors) => {
                writeln!(f, "invalid config:")?;
                for e in errors {
                    writeln!(f, "  {e}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 500,
            input_dim: 4,
            noise: 0.35,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    NonIid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionKind,
    /// Classes per client in `non_iid` mode.
    pub classes_per_client: usize,
    /// Equal-size mode: samples per client.
    pub samples_per_client: usize,
    /// Proportional mode: one positive weight per client. Overrides
    /// `samples_per_client` when present.
    pub proportions: Option<Vec<f64>>,
    /// Proportional mode: total samples handed out.
    pub total_samples: Option<usize>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            mode: PartitionKind::NonIid,
            classes_per_client: 3,
            samples_per_client: 90,
            proportions: None,
            total_samples: None,
        }
    }
}

impl PartitionConfig {
    pub fn mode(&self) -> PartitionMode {
        match self.mode {
            PartitionKind::Iid => PartitionMode::Iid,
            PartitionKind::NonIid => PartitionMode::NonIid(self.classes_per_client),
        }
    }

    pub fn sizes(&self, num_clients: usize) -> PartitionSizes {
        match &self.proportions {
            Some(weights) => PartitionSizes::Proportional {
                weights: weights.clone(),
                total: self.total_samples.unwrap_or(self.samples_per_client * num_clients),
            },
            None => PartitionSizes::Equal {
                per_client: self.samples_per_client,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedConfig {
    /// Lower end of the uniform speed-factor range.
    pub min: f64,
    pub max: f64,
    /// Explicit per-client speed factors; overrides the range.
    pub explicit: Option<Vec<f64>>,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self {
            min: 0.1,
            max: 1.0,
            explicit: None,
        }
    }
}

/// Per-batch phase costs of a speed-1.0 client, plus message latencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub ff: f64,
    pub fc: f64,
    pub bc: f64,
    pub bf: f64,
    pub dispatch_latency: f64,
    pub transfer_latency: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        let p = PhaseTimings::default_profile();
        Self {
            ff: p.ff,
            fc: p.fc,
            bc: p.bc,
            bf: p.bf,
            dispatch_latency: 0.0,
            transfer_latency: 0.0,
        }
    }
}

impl TimingConfig {
    pub fn base_profile(&self) -> PhaseTimings {
        PhaseTimings {
            ff: self.ff,
            fc: self.fc,
            bc: self.bc,
            bf: self.bf,
        }
    }
}

/// Defaults for strategy parameters that a `[[strategies]]` entry may omit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyDefaults {
    pub similarity_factor: f64,
    pub profile_batches: usize,
    pub profile_noise: f64,
    pub deadline_multiplier: f64,
    pub tiers: usize,
    pub proximal_mu: f64,
}

impl Default for StrategyDefaults {
    fn default() -> Self {
        Self {
            similarity_factor: 1.0,
            profile_batches: 1,
            profile_noise: 0.0,
            deadline_multiplier: 1.0,
            tiers: 3,
            proximal_mu: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    #[serde(rename = "fedavg")]
    FedAvg,
    Aergia {
        f: Option<f64>,
        profile_batches: Option<usize>,
        profile_noise: Option<f64>,
    },
    Deadline {
        multiplier: Option<f64>,
    },
    Tifl {
        tiers: Option<usize>,
    },
    #[serde(rename = "fedprox")]
    FedProx {
        mu: Option<f64>,
    },
    #[serde(rename = "fednova")]
    FedNova,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEntry {
    /// Label used in output file names; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub spec: StrategySpec,
}

impl StrategyEntry {
    pub fn new(spec: StrategySpec) -> Self {
        Self { name: None, spec }
    }

    pub fn named(name: &str, spec: StrategySpec) -> Self {
        Self {
            name: Some(name.to_string()),
            spec,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            match self.spec {
                StrategySpec::FedAvg => "fedavg",
                StrategySpec::Aergia { .. } => "aergia",
                StrategySpec::Deadline { .. } => "deadline",
                StrategySpec::Tifl { .. } => "tifl",
                StrategySpec::FedProx { .. } => "fedprox",
                StrategySpec::FedNova => "fednova",
            }
            .to_string()
        })
    }

    pub fn resolve(&self, d: &StrategyDefaults) -> Strategy {
        match self.spec {
            StrategySpec::FedAvg => Strategy::FedAvg,
            StrategySpec::Aergia {
                f,
                profile_batches,
                profile_noise,
            } => Strategy::Aergia {
                similarity_factor: f.unwrap_or(d.similarity_factor),
                profile_batches: profile_batches.unwrap_or(d.profile_batches),
                profile_noise: profile_noise.unwrap_or(d.profile_noise),
            },
            StrategySpec::Deadline { multiplier } => Strategy::Deadline {
                multiplier: multiplier.unwrap_or(d.deadline_multiplier),
            },
            StrategySpec::Tifl { tiers } => Strategy::Tifl {
                tiers: tiers.unwrap_or(d.tiers),
            },
            StrategySpec::FedProx { mu } => Strategy::FedProx {
                mu: mu.unwrap_or(d.proximal_mu),
            },
            StrategySpec::FedNova => Strategy::FedNova,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. Replicate `i` runs with `seed + i`.
    pub seed: u64,
    pub replicates: usize,
    pub rounds: usize,
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub local_updates: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub speeds: SpeedConfig,
    pub timing: TimingConfig,
    pub defaults: StrategyDefaults,
    pub strategies: Vec<StrategyEntry>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            replicates: 1,
            rounds: 100,
            num_clients: 24,
            clients_per_round: 3,
            local_updates: 16,
            batch_size: 32,
            learning_rate: 0.05,
            hidden_dim: 16,
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            speeds: SpeedConfig::default(),
            timing: TimingConfig::default(),
            defaults: StrategyDefaults::default(),
            strategies: vec![
                StrategyEntry::new(StrategySpec::FedAvg),
                StrategyEntry::new(StrategySpec::Aergia {
                    f: None,
                    profile_batches: None,
                    profile_noise: None,
                }),
            ],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.dataset.num_classes,
            samples_per_class: self.dataset.samples_per_class,
            input_dim: self.dataset.input_dim,
            noise: self.dataset.noise,
            seed,
        }
    }

    /// `(label, strategy)` pairs in file order.
    pub fn resolved_strategies(&self) -> Vec<(String, Strategy)> {
        self.strategies.iter().map(|e| (e.label(), e.resolve(&self.defaults))).collect()
    }

    pub fn replicate_seeds(&self) -> Vec<u64> {
        (0..self.replicates as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let mut err = |field: &str, message: String| {
            errors.push(FieldError {
                field: field.to_string(),
                message,
            })
        };
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;

        if self.replicates == 0 {
            err("replicates", "must be >= 1".into());
        }
        if self.num_clients == 0 {
            err("num_clients", "must be >= 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            err(
                "clients_per_round",
                format!("must be in [1, num_clients={}], got {}", self.num_clients, self.clients_per_round),
            );
        }
        if self.local_updates == 0 {
            err("local_updates", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            err("batch_size", "must be >= 1".into());
        }
        if !positive(self.learning_rate) {
            err("learning_rate", format!("must be > 0, got {}", self.learning_rate));
        }
        if self.hidden_dim == 0 {
            err("hidden_dim", "must be >= 1".into());
        }

        let d = &self.dataset;
        if d.num_classes == 0 {
            err("dataset.num_classes", "must be >= 1".into());
        }
        if d.samples_per_class == 0 {
            err("dataset.samples_per_class", "must be >= 1".into());
        }
        if d.input_dim == 0 {
            err("dataset.input_dim", "must be >= 1".into());
        }
        if !non_negative(d.noise) {
            err("dataset.noise", format!("must be >= 0, got {}", d.noise));
        }

        let p = &self.partition;
        if p.mode == PartitionKind::NonIid && (p.classes_per_client == 0 || p.classes_per_client > d.num_classes) {
            err(
                "partition.classes_per_client",
                format!("must be in [1, {}], got {}", d.num_classes, p.classes_per_client),
            );
        }
        match &p.proportions {
            Some(w) => {
                if w.len() != self.num_clients {
                    err(
                        "partition.proportions",
                        format!("needs {} entries, got {}", self.num_clients, w.len()),
                    );
                }
                if w.iter().any(|v| !positive(*v)) {
                    err("partition.proportions", "entries must be > 0".into());
                }
            }
            None => {
                if p.samples_per_client == 0 {
                    err("partition.samples_per_client", "must be >= 1".into());
                }
            }
        }

        let s = &self.speeds;
        match &s.explicit {
            Some(list) => {
                if list.len() != self.num_clients {
                    err(
                        "speeds.explicit",
                        format!("needs {} entries, got {}", self.num_clients, list.len()),
                    );
                }
                if list.iter().any(|v| !(v.is_finite() && *v > 0.0 && *v <= 1.0)) {
                    err("speeds.explicit", "entries must be in (0, 1]".into());
                }
            }
            None => {
                if !(s.min.is_finite() && s.min > 0.0 && s.min <= s.max && s.max <= 1.0) {
                    err("speeds", format!("need 0 < min <= max <= 1, got min={} max={}", s.min, s.max));
                }
            }
        }

        let t = &self.timing;
        for (name, v) in [("timing.ff", t.ff), ("timing.fc", t.fc), ("timing.bc", t.bc), ("timing.bf", t.bf)] {
            if !positive(v) {
                err(name, format!("must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("timing.dispatch_latency", t.dispatch_latency),
            ("timing.transfer_latency", t.transfer_latency),
        ] {
            if !non_negative(v) {
                err(name, format!("must be >= 0, got {v}"));
            }
        }

        if self.strategies.is_empty() {
            err("strategies", "at least one strategy is required".into());
        }
        let mut labels = BTreeSet::new();
        for (i, entry) in self.strategies.iter().enumerate() {
            let label = entry.label();
            let field = format!("strategies[{i}]");
            if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.') {
                // `_` separates label from seed in trace file names.
                err(&format!("{field}.name"), format!("must be non-empty [A-Za-z0-9.-], got {label:?}"));
            }
            if !labels.insert(label.clone()) {
                err(&format!("{field}.name"), format!("duplicate strategy label {label:?}"));
            }
            match entry.resolve(&self.defaults) {
                Strategy::Aergia {
                    similarity_factor,
                    profile_batches,
                    profile_noise,
                } => {
                    if !non_negative(similarity_factor) {
                        err(&format!("{field}.f"), format!("must be >= 0, got {similarity_factor}"));
                    }
                    if profile_batches == 0 || profile_batches > self.local_updates {
                        err(
                            &format!("{field}.profile_batches"),
                            format!("must be in [1, local_updates={}], got {profile_batches}", self.local_updates),
                        );
                    }
                    if !non_negative(profile_noise) {
                        err(&format!("{field}.profile_noise"), format!("must be >= 0, got {profile_noise}"));
                    }
                }
                Strategy::Deadline { multiplier } => {
                    if !positive(multiplier) {
                        err(&format!("{field}.multiplier"), format!("must be > 0, got {multiplier}"));
                    }
                }
                Strategy::Tifl { tiers } => {
                    if tiers == 0 || tiers > self.num_clients {
                        err(
                            &format!("{field}.tiers"),
                            format!("must be in [1, num_clients={}], got {tiers}", self.num_clients),
                        );
                    }
                }
                Strategy::FedProx { mu } => {
                    if !non_negative(mu) {
                        err(&format!("{field}.mu"), format!("must be >= 0, got {mu}"));
                    }
                }
                Strategy::FedAvg | Strategy::FedNova => {}
            }
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }
}
