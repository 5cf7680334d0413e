//! Round protocol driven by a virtual-time event queue.
//!
//! Baselines start every selected client on its full local budget and wait
//! for the submissions. The offloading protocol runs in four steps:
//!
//! 1. every client runs its first `P` batches in full and reports a profile;
//! 2. once the last profile is in, the federator builds the offload schedule
//!    (clients keep training in full while they wait);
//! 3. a weak client trains in full up to `U − d`, hands its feature block and
//!    a classifier snapshot to its strong partner, then trains its
//!    classifier alone for the remaining `d` batches; the strong partner
//!    finishes its own `U` batches and then trains the handed-off feature
//!    block for `d` batches on its own data;
//! 4. the federator recombines each weak client's model from the two
//!    returned blocks and averages everything with dataset-size weights.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::aggregate::{aggregate_fedavg, aggregate_fednova, recombine, AggregateError};
use super::client::{execute_offloaded, ClientState, TrainMode, TrainOptions};
use super::events::{EventKind, EventQueue, Submission};
use super::strategy::Strategy;
use super::trace::{ExperimentResult, ExperimentSummary, RoundTrace, WorkRecord};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{generate_synthetic, partition, ClientPartition, Dataset, PartitionError};
use crate::model::{Batch, ClassifierBlock, FeatureBlock, ModelError, PartitionedModel};
use crate::profiler::{ground_truth_timings, measure, ClientProfile, MeasureParams, PhaseTimings, ProfilerError};
use crate::scheduler::{build_schedule, OffloadSchedule, SchedulerError};
use crate::similarity::{ClassCountSubmission, SimilarityError, SimilarityMatrix, SimilarityOracle};
use crate::{seeds, ClientId};

/// Slack when converting elapsed virtual time into completed batches.
const BATCH_COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Profiler(#[from] ProfilerError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("cannot select {count} of {available} clients")]
    Selection { count: usize, available: usize },
    #[error("protocol violation: {0}")]
    Protocol(String),
}

/// Uniform selection without replacement, deterministic per `(seed, round)`.
/// Returned ids are sorted.
pub fn select_clients(num_clients: usize, count: usize, round: usize, seed: u64) -> Result<Vec<ClientId>, SimError> {
    if count > num_clients {
        return Err(SimError::Selection {
            count,
            available: num_clients,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::SELECTION, round as u64, 0));
    let mut ids: Vec<ClientId> = rand::seq::index::sample(&mut rng, num_clients, count)
        .into_iter()
        .map(|i| i as ClientId)
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Everything a run shares across strategies for one seed: data, client
/// split, speeds, similarity matrix and the initial global model.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub dataset: Dataset,
    pub partitions: Vec<ClientPartition>,
    pub speeds: Vec<f64>,
    pub timings: Vec<PhaseTimings>,
    pub similarity: SimilarityMatrix,
    pub initial_model: PartitionedModel,
    test: Batch,
}

impl Experiment {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self, SimError> {
        config.validate()?;
        let m = config.num_clients;
        let dataset = generate_synthetic(&config.synthetic_spec(seeds::derive(seed, seeds::DATASET, 0, 0)))?;
        let partitions = partition(
            &dataset,
            m,
            config.partition.mode(),
            &config.partition.sizes(m),
            seeds::derive(seed, seeds::PARTITION, 0, 0),
        )?;
        let speeds = match &config.speeds.explicit {
            Some(list) => list.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::SPEEDS, 0, 0));
                (0..m).map(|_| rng.random_range(config.speeds.min..=config.speeds.max)).collect()
            }
        };
        let base = config.timing.base_profile();
        let timings = speeds
            .iter()
            .map(|&s| ground_truth_timings(&base, s))
            .collect::<Result<Vec<_>, _>>()?;

        let oracle = SimilarityOracle::new(dataset.num_classes);
        for p in &partitions {
            oracle.submit(ClassCountSubmission {
                client_id: p.client_id,
                counts: p.class_counts.clone(),
            })?;
        }
        let ids: Vec<ClientId> = partitions.iter().map(|p| p.client_id).collect();
        let similarity = oracle.compute_matrix(&ids)?;

        let initial_model = PartitionedModel::init(
            dataset.input_dim(),
            config.hidden_dim,
            dataset.num_classes,
            seeds::derive(seed, seeds::MODEL_INIT, 0, 0),
        )?;
        let test = dataset.test_batch();
        Ok(Self {
            config: config.clone(),
            seed,
            dataset,
            partitions,
            speeds,
            timings,
            similarity,
            initial_model,
            test,
        })
    }

    pub fn simulation(&self, strategy: Strategy) -> Simulation<'_> {
        Simulation::new(self, strategy)
    }

    pub fn test_accuracy(&self, model: &PartitionedModel) -> Result<f64, SimError> {
        Ok(model.accuracy(&self.test.inputs, &self.test.labels)?)
    }

    pub fn run(&self, label: &str, strategy: Strategy) -> Result<ExperimentResult, SimError> {
        let mut sim = self.simulation(strategy);
        let traces = (0..self.config.rounds)
            .map(|r| sim.run_round(r))
            .collect::<Result<Vec<_>, _>>()?;
        let summary = ExperimentSummary::from_traces(&traces);
        Ok(ExperimentResult {
            label: label.to_string(),
            seed: self.seed,
            traces,
            summary,
        })
    }
}

/// Runs every `(strategy, replicate)` pair of `config`. Results are ordered
/// by strategy (file order), then by seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ExperimentResult>, SimError> {
    config.validate()?;
    let experiments = config
        .replicate_seeds()
        .into_par_iter()
        .map(|seed| Experiment::new(config, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(String, Strategy, &Experiment)> = config
        .resolved_strategies()
        .into_iter()
        .flat_map(|(label, strategy)| experiments.iter().map(move |e| (label.clone(), strategy, e)))
        .collect();
    jobs.into_par_iter()
        .map(|(label, strategy, exp)| exp.run(&label, strategy))
        .collect()
}

#[derive(Debug, Default)]
struct PartialModel {
    classifier: Option<ClassifierBlock>,
    feature: Option<FeatureBlock>,
    time: f64,
}

#[derive(Debug)]
struct RoundState {
    round: usize,
    start: f64,
    selected: Vec<ClientId>,
    executed: BTreeMap<ClientId, usize>,
    reports: BTreeMap<ClientId, ClientProfile>,
    strong_free_at: BTreeMap<ClientId, f64>,
    partial: BTreeMap<ClientId, PartialModel>,
    complete: BTreeMap<ClientId, (PartitionedModel, f64)>,
    work: BTreeMap<ClientId, WorkRecord>,
    profiles: Vec<ClientProfile>,
    schedule: Option<OffloadSchedule>,
    closed_at: Option<f64>,
}

impl RoundState {
    fn new(round: usize, start: f64, selected: Vec<ClientId>) -> Self {
        let work = selected.iter().map(|&c| (c, WorkRecord::new(c))).collect();
        Self {
            round,
            start,
            selected,
            executed: BTreeMap::new(),
            reports: BTreeMap::new(),
            strong_free_at: BTreeMap::new(),
            partial: BTreeMap::new(),
            complete: BTreeMap::new(),
            work,
            profiles: Vec::new(),
            schedule: None,
            closed_at: None,
        }
    }

    fn work(&mut self, c: ClientId) -> &mut WorkRecord {
        self.work.get_mut(&c).expect("selected client")
    }
}

/// One strategy running over an [`Experiment`], round by round.
pub struct Simulation<'a> {
    exp: &'a Experiment,
    strategy: Strategy,
    clients: Vec<ClientState>,
    global: PartitionedModel,
    queue: EventQueue,
    tiers: Vec<Vec<ClientId>>,
    stale_events: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(exp: &'a Experiment, strategy: Strategy) -> Self {
        let clients = exp
            .partitions
            .iter()
            .map(|p| {
                let id = p.client_id;
                ClientState::new(
                    id,
                    exp.speeds[id as usize],
                    exp.timings[id as usize],
                    p.clone(),
                    exp.initial_model.clone(),
                    exp.config.batch_size,
                    seeds::derive(exp.seed, seeds::CLIENT_SHUFFLE, id as u64, 0),
                )
            })
            .collect();
        let tiers = match strategy {
            Strategy::Tifl { tiers } => speed_tiers(&exp.timings, tiers),
            _ => Vec::new(),
        };
        Self {
            exp,
            strategy,
            clients,
            global: exp.initial_model.clone(),
            queue: EventQueue::new(),
            tiers,
            stale_events: 0,
        }
    }

    pub fn global_model(&self) -> &PartitionedModel {
        &self.global
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Current virtual time.
    pub fn clock(&self) -> f64 {
        self.queue.now()
    }

    /// Events discarded because they arrived after their round closed.
    pub fn stale_events(&self) -> usize {
        self.stale_events
    }

    pub fn tiers(&self) -> &[Vec<ClientId>] {
        &self.tiers
    }

    fn select(&self, round: usize) -> Result<Vec<ClientId>, SimError> {
        let cfg = &self.exp.config;
        match self.strategy {
            Strategy::Tifl { .. } => {
                let tier = &self.tiers[round % self.tiers.len()];
                let count = cfg.clients_per_round.min(tier.len());
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.exp.seed, seeds::SELECTION, round as u64, 1));
                let mut ids: Vec<ClientId> = rand::seq::index::sample(&mut rng, tier.len(), count)
                    .into_iter()
                    .map(|i| tier[i])
                    .collect();
                ids.sort_unstable();
                Ok(ids)
            }
            _ => select_clients(cfg.num_clients, cfg.clients_per_round, round, self.exp.seed),
        }
    }

    fn train(&mut self, c: ClientId, updates: usize, mode: TrainMode, anchor: &PartitionedModel) -> Result<f64, SimError> {
        let lr = self.exp.config.learning_rate;
        let proximal = match self.strategy {
            Strategy::FedProx { mu } => Some((mu, anchor)),
            _ => None,
        };
        let opts = TrainOptions { lr, proximal };
        Ok(self.clients[c as usize].local_train(&self.exp.dataset, updates, mode, &opts)?)
    }

    /// Plays one round to completion and returns its trace.
    pub fn run_round(&mut self, round: usize) -> Result<RoundTrace, SimError> {
        let start = self.queue.now();
        let selected = self.select(round)?;
        for &c in &selected {
            self.clients[c as usize].model = self.global.clone();
        }
        let anchor = self.global.clone();
        let mut st = RoundState::new(round, start, selected);
        self.queue.push(start, round, EventKind::RoundStart);

        while let Some(event) = self.queue.pop() {
            if event.round != round {
                self.stale_events += 1;
                continue;
            }
            let now = event.time;
            match event.kind {
                EventKind::RoundStart => self.on_round_start(&mut st, &anchor)?,
                EventKind::ProfileReport { client, profile } => {
                    st.reports.insert(client, profile);
                    if st.reports.len() == st.selected.len() {
                        let at = now + self.exp.config.timing.dispatch_latency;
                        self.queue.push(at, round, EventKind::ScheduleDispatch);
                    }
                }
                EventKind::ScheduleDispatch => self.on_dispatch(&mut st, now, &anchor)?,
                EventKind::OffloadHandoff {
                    weak,
                    strong,
                    feature,
                    classifier,
                    batches,
                } => {
                    let begin = now.max(st.strong_free_at.get(&strong).copied().unwrap_or(now));
                    let lr = self.exp.config.learning_rate;
                    let (trained, t) =
                        execute_offloaded(&mut self.clients[strong as usize], &self.exp.dataset, feature, &classifier, batches, lr)?;
                    st.work(strong).hosted_batches += batches;
                    st.strong_free_at.insert(strong, begin + t);
                    self.queue.push(
                        begin + t,
                        round,
                        EventKind::ModelSubmit {
                            owner: weak,
                            sender: strong,
                            payload: Submission::OffloadedFeature(trained),
                        },
                    );
                }
                EventKind::ModelSubmit { owner, payload, .. } => self.deliver(&mut st, owner, payload, now)?,
                EventKind::RoundEnd => {
                    st.closed_at = Some(now);
                    break;
                }
            }
        }

        // Anything still queued for this round arrived after it closed.
        let mut dropped: Vec<ClientId> = Vec::new();
        for event in self.queue.drain() {
            self.stale_events += 1;
            if let EventKind::ModelSubmit { owner, .. } = event.kind {
                if !st.complete.contains_key(&owner) && !dropped.contains(&owner) {
                    dropped.push(owner);
                }
            }
        }
        for &c in &st.selected {
            if !st.complete.contains_key(&c) && !dropped.contains(&c) {
                dropped.push(c);
            }
        }
        dropped.sort_unstable();

        let closed_at = st
            .closed_at
            .ok_or_else(|| SimError::Protocol(format!("round {round} never closed")))?;
        self.aggregate(&st)?;
        let accuracy = self.exp.test_accuracy(&self.global)?;
        let aggregated_weight = st.complete.keys().map(|&c| self.clients[c as usize].num_samples()).sum();

        Ok(RoundTrace {
            round,
            start_time: start,
            duration: closed_at - start,
            selected: st.selected.clone(),
            completion_times: st.complete.iter().map(|(&c, (_, t))| (c, t - start)).collect(),
            accuracy,
            dropped,
            aggregated_weight,
            profiles: st.profiles,
            schedule: st.schedule,
            work: st.work.into_values().collect(),
        })
    }

    fn on_round_start(&mut self, st: &mut RoundState, anchor: &PartitionedModel) -> Result<(), SimError> {
        let cfg = &self.exp.config;
        let updates = cfg.local_updates;
        let start = st.start;
        let round = st.round;
        let selected = st.selected.clone();
        match self.strategy {
            Strategy::Aergia {
                profile_batches,
                profile_noise,
                ..
            } => {
                for &c in &selected {
                    let t = self.train(c, profile_batches, TrainMode::Full, anchor)?;
                    st.work(c).full_batches += profile_batches;
                    st.executed.insert(c, profile_batches);
                    let profile = measure(
                        c,
                        &self.clients[c as usize].timings,
                        MeasureParams {
                            profiled_batches: profile_batches,
                            total_updates: updates,
                            noise: profile_noise,
                            seed: seeds::derive(self.exp.seed, seeds::PROFILE_NOISE, round as u64, c as u64),
                        },
                    )?;
                    self.queue.push(start + t, round, EventKind::ProfileReport { client: c, profile });
                }
            }
            _ => {
                for &c in &selected {
                    let t = self.train(c, updates, TrainMode::Full, anchor)?;
                    st.work(c).full_batches += updates;
                    let model = self.clients[c as usize].model.clone();
                    self.queue.push(
                        start + t,
                        round,
                        EventKind::ModelSubmit {
                            owner: c,
                            sender: c,
                            payload: Submission::Full(model),
                        },
                    );
                }
                if let Strategy::Deadline { multiplier } = self.strategy {
                    let mean_estimate = selected
                        .iter()
                        .map(|&c| self.clients[c as usize].train_time(updates, TrainMode::Full))
                        .sum::<f64>()
                        / selected.len() as f64;
                    self.queue.push(start + multiplier * mean_estimate, round, EventKind::RoundEnd);
                }
            }
        }
        Ok(())
    }

    fn on_dispatch(&mut self, st: &mut RoundState, now: f64, anchor: &PartitionedModel) -> Result<(), SimError> {
        let Strategy::Aergia { similarity_factor, .. } = self.strategy else {
            return Err(SimError::Protocol("schedule dispatched outside the offloading protocol".into()));
        };
        let updates = self.exp.config.local_updates;
        let (start, round) = (st.start, st.round);
        let selected = st.selected.clone();

        // Clients kept training in full while the federator was deciding.
        let mut profiles = Vec::with_capacity(selected.len());
        for &c in &selected {
            let per_batch = self.clients[c as usize].timings.total();
            let done_before = st.executed[&c];
            let completed = (((now - start) / per_batch + BATCH_COUNT_SLACK).floor() as usize).clamp(done_before, updates);
            let extra = completed - done_before;
            self.train(c, extra, TrainMode::Full, anchor)?;
            st.work(c).full_batches += extra;
            st.executed.insert(c, completed);
            profiles.push(st.reports[&c].after_waiting(extra));
        }

        let schedule = build_schedule(&profiles, &self.exp.similarity, similarity_factor, round)?;
        let transfer = self.exp.config.timing.transfer_latency;

        for a in &schedule.assignments {
            let (w, s, d) = (a.weak_client, a.strong_client, a.offload_point);
            let handoff_after = updates - d;
            let executed = st.executed[&w];
            if handoff_after < executed {
                return Err(SimError::Protocol(format!(
                    "client {w} already ran {executed} batches, past its offload point {handoff_after}"
                )));
            }
            let more = handoff_after - executed;
            self.train(w, more, TrainMode::Full, anchor)?;
            st.work(w).full_batches += more;
            st.executed.insert(w, handoff_after);

            let t_full = self.clients[w as usize].timings.total();
            let handoff = now.max(start + handoff_after as f64 * t_full);
            let (feature, classifier) = self.clients[w as usize].model.split();
            self.queue.push(
                handoff + transfer,
                round,
                EventKind::OffloadHandoff {
                    weak: w,
                    strong: s,
                    feature,
                    classifier,
                    batches: d,
                },
            );

            let t_frozen = self.train(w, d, TrainMode::Frozen, anchor)?;
            let work = st.work(w);
            work.frozen_batches += d;
            work.offloaded_batches += d;
            let (_, trained_classifier) = self.clients[w as usize].model.split();
            st.partial.insert(w, PartialModel::default());
            self.queue.push(
                handoff + t_frozen,
                round,
                EventKind::ModelSubmit {
                    owner: w,
                    sender: w,
                    payload: Submission::Classifier(trained_classifier),
                },
            );
        }

        for &c in &selected {
            if schedule.assignment_for_weak(c).is_some() {
                continue;
            }
            let remaining = updates - st.executed[&c];
            self.train(c, remaining, TrainMode::Full, anchor)?;
            st.work(c).full_batches += remaining;
            st.executed.insert(c, updates);
            let finish = start + self.clients[c as usize].train_time(updates, TrainMode::Full);
            st.strong_free_at.insert(c, finish);
            let model = self.clients[c as usize].model.clone();
            if finish < now {
                // Finished before the schedule arrived; it submitted then.
                self.deliver(st, c, Submission::Full(model), finish)?;
            } else {
                self.queue.push(
                    finish,
                    round,
                    EventKind::ModelSubmit {
                        owner: c,
                        sender: c,
                        payload: Submission::Full(model),
                    },
                );
            }
        }

        st.profiles = profiles;
        st.schedule = Some(schedule);
        Ok(())
    }

    fn deliver(&mut self, st: &mut RoundState, owner: ClientId, payload: Submission, at: f64) -> Result<(), SimError> {
        match payload {
            Submission::Full(model) => {
                st.complete.insert(owner, (model, at));
            }
            Submission::Classifier(block) => {
                let part = st.partial.entry(owner).or_default();
                part.classifier = Some(block);
                part.time = part.time.max(at);
            }
            Submission::OffloadedFeature(block) => {
                let part = st.partial.entry(owner).or_default();
                part.feature = Some(block);
                part.time = part.time.max(at);
            }
        }
        if let Some(part) = st.partial.get(&owner) {
            if part.classifier.is_some() && part.feature.is_some() {
                let part = st.partial.remove(&owner).expect("present");
                let model = recombine(part.feature.expect("checked"), part.classifier.expect("checked"))?;
                st.complete.insert(owner, (model, part.time));
            }
        }
        if st.complete.len() == st.selected.len() {
            let last = st.complete.values().map(|(_, t)| *t).fold(st.start, f64::max);
            self.queue.push(last, st.round, EventKind::RoundEnd);
        }
        Ok(())
    }

    fn aggregate(&mut self, st: &RoundState) -> Result<(), SimError> {
        if st.complete.is_empty() {
            return Ok(());
        }
        let (models, sizes): (Vec<PartitionedModel>, Vec<usize>) = st
            .complete
            .iter()
            .map(|(&c, (m, _))| (m.clone(), self.clients[c as usize].num_samples()))
            .unzip();
        self.global = match self.strategy {
            Strategy::FedNova => {
                let steps: Vec<usize> = st
                    .complete
                    .keys()
                    .map(|c| {
                        let w = &st.work[c];
                        w.full_batches + w.frozen_batches
                    })
                    .collect();
                aggregate_fednova(&self.global, &models, &sizes, &steps)?
            }
            _ => aggregate_fedavg(&models, &sizes)?,
        };
        Ok(())
    }
}

/// Splits clients into `count` equal-size tiers by full-batch time, fastest
/// tier first. Earlier tiers take the remainder.
fn speed_tiers(timings: &[PhaseTimings], count: usize) -> Vec<Vec<ClientId>> {
    let mut order: Vec<ClientId> = (0..timings.len() as ClientId).collect();
    order.sort_by(|&a, &b| {
        timings[a as usize]
            .total()
            .total_cmp(&timings[b as usize].total())
            .then(a.cmp(&b))
    });
    let count = count.clamp(1, order.len().max(1));
    let base = order.len() / count;
    let extra = order.len() % count;
    let mut tiers = Vec::with_capacity(count);
    let mut it = order.into_iter();
    for t in 0..count {
        let size = base + usize::from(t < extra);
        tiers.push(it.by_ref().take(size).collect());
    }
    tiers
}
