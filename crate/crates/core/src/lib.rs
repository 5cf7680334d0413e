//! Virtual-time simulation of synchronous federated learning with
//! heterogeneous client speeds, and the freeze-and-offload straggler
//! mitigation scheduler.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: the two-block classifier trained by every client.
//! - [`data`]: synthetic data and its IID / label-skewed client split.
//! - [`similarity`]: pairwise label-distribution distance behind an
//!   isolation boundary.
//! - [`profiler`]: per-phase batch timings, true and measured.
//! - [`scheduler`]: weak-to-strong matching and offload points.
//! - [`sim`]: the discrete-event round engine, strategies and aggregation.
//! - [`config`] and [`cli`]: experiment files and the command-line front end.

pub mod cli;
pub mod config;
pub mod data;
pub mod model;
pub mod profiler;
pub mod scheduler;
pub mod similarity;
pub mod sim;

pub type ClientId = u32;

/// Independent seed streams derived from one master seed.
pub mod seeds {
    pub const DATASET: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SPEEDS: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const SELECTION: u64 = 5;
    pub const CLIENT_SHUFFLE: u64 = 6;
    pub const PROFILE_NOISE: u64 = 7;

    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Mixes a master seed with a stream tag and two indices.
    pub fn derive(master: u64, stream: u64, a: u64, b: u64) -> u64 {
        let mut h = splitmix64(master);
        for v in [stream, a, b] {
            h = splitmix64(h ^ v);
        }
        h
    }
}
