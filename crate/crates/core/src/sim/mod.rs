//! Discrete-event simulation of federated training rounds in virtual time.

mod aggregate;
mod client;
mod engine;
mod events;
mod strategy;
mod trace;

pub use aggregate::{aggregate_fedavg, aggregate_fednova, recombine, AggregateError};
pub use client::{execute_offloaded, ClientState, TrainMode, TrainOptions};
pub use engine::{run_experiment, select_clients, Experiment, SimError, Simulation};
pub use events::{Event, EventKind, EventQueue, Submission};
pub use strategy::Strategy;
pub use trace::{ExperimentResult, ExperimentSummary, RoundTrace, WorkRecord};
