//! Per-phase batch timings: the ground truth a client's speed implies, and the
//! noisy estimate the online profiler reports after its first batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ClientId;

/// Floor applied to noisy samples, relative to the true phase time.
const MIN_SAMPLE_FRACTION: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfilerError {
    #[error("speed factor must be in (0, 1], got {0}")]
    InvalidSpeedFactor(f64),
    #[error("phase timings must be finite and > 0, got {0:?}")]
    InvalidTimings(PhaseTimings),
    #[error("profiled batches must be in [1, {total}], got {profiled}")]
    InvalidBatchCount { profiled: usize, total: usize },
    #[error("noise must be finite and >= 0, got {0}")]
    InvalidNoise(f64),
}

/// Virtual seconds one batch spends in each training phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub ff: f64,
    pub fc: f64,
    pub bc: f64,
    pub bf: f64,
}

impl PhaseTimings {
    pub fn new(ff: f64, fc: f64, bc: f64, bf: f64) -> Result<Self, ProfilerError> {
        let t = Self { ff, fc, bc, bf };
        t.validate()?;
        Ok(t)
    }

    /// A 1-second batch with 65 % of its time in the feature backward pass.
    pub fn default_profile() -> Self {
        Self {
            ff: 0.15,
            fc: 0.05,
            bc: 0.15,
            bf: 0.65,
        }
    }

    pub fn validate(&self) -> Result<(), ProfilerError> {
        if self.as_array().iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(ProfilerError::InvalidTimings(*self))
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.ff, self.fc, self.bc, self.bf]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            ff: a[0],
            fc: a[1],
            bc: a[2],
            bf: a[3],
        }
    }

    /// Full batch: all four phases.
    pub fn total(&self) -> f64 {
        self.ff + self.fc + self.bc + self.bf
    }

    /// Frozen batch: everything but the feature backward pass.
    pub fn frozen(&self) -> f64 {
        self.ff + self.fc + self.bc
    }

    pub fn bf_fraction(&self) -> f64 {
        self.bf / self.total()
    }
}

/// What the federator knows about a client when it schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: ClientId,
    pub timings: PhaseTimings,
    pub remaining_updates: usize,
}

impl ClientProfile {
    /// `remaining_updates × full batch time`.
    pub fn estimated_remaining(&self) -> f64 {
        self.remaining_updates as f64 * self.timings.total()
    }

    /// Accounts for batches run while waiting for the schedule.
    pub fn after_waiting(mut self, batches: usize) -> Self {
        self.remaining_updates = self.remaining_updates.saturating_sub(batches);
        self
    }
}

pub fn ground_truth_timings(base: &PhaseTimings, speed_factor: f64) -> Result<PhaseTimings, ProfilerError> {
    base.validate()?;
    if !(speed_factor > 0.0 && speed_factor <= 1.0) {
        return Err(ProfilerError::InvalidSpeedFactor(speed_factor));
    }
    Ok(PhaseTimings::from_array(base.as_array().map(|t| t / speed_factor)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasureParams {
    pub profiled_batches: usize,
    pub total_updates: usize,
    /// Relative standard deviation of each per-batch sample.
    pub noise: f64,
    pub seed: u64,
}

/// Averages `profiled_batches` samples of each phase, each drawn as
/// `truth · (1 + noise·z)` and floored at a tiny positive value.
pub fn measure(client_id: ClientId, truth: &PhaseTimings, params: MeasureParams) -> Result<ClientProfile, ProfilerError> {
    truth.validate()?;
    let MeasureParams {
        profiled_batches,
        total_updates,
        noise,
        seed,
    } = params;
    if profiled_batches == 0 || profiled_batches > total_updates {
        return Err(ProfilerError::InvalidBatchCount {
            profiled: profiled_batches,
            total: total_updates,
        });
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(ProfilerError::InvalidNoise(noise));
    }
    let timings = if noise == 0.0 {
        *truth
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).expect("valid sigma");
        let mut sums = [0.0; 4];
        for _ in 0..profiled_batches {
            for (sum, t) in sums.iter_mut().zip(truth.as_array()) {
                let sample = t * (1.0 + normal.sample(&mut rng));
                *sum += sample.max(t * MIN_SAMPLE_FRACTION);
            }
        }
        PhaseTimings::from_array(sums.map(|s| s / profiled_batches as f64))
    };
    Ok(ClientProfile {
        client_id,
        timings,
        remaining_updates: total_updates - profiled_batches,
    })
}
