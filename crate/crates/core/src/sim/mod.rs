//! Virtual-time simulation of federated training rounds.
//!
//! Nothing here waits on a wall clock: every client update is scheduled at
//! the virtual millisecond it would finish, and a priority queue replays
//! the round in order. Time restarts at zero each round. A client may
//! begin an update only while the elapsed time is strictly below the round
//! budget `H`; an update already running when the budget expires still
//! completes and commits.
//!
//! Groups are independent. Within one round each aggregation group runs
//! one of two disciplines:
//!
//! * **Synchronous**: every selected member trains from the group model,
//!   the barrier waits for the slowest, and the results are averaged with
//!   sample-count weights. Iterations repeat while the barrier lands
//!   before `H`.
//! * **Semi-asynchronous**: each member commits into the group model the
//!   moment it finishes (replacing it or mixing by a fixed factor) and
//!   immediately starts again. Every commit advances the group version.
//!
//! A semi-asynchronous group may also carry a staleness threshold `L`.
//! After a client commits, the gap between the group version it just
//! wrote and the version it wrote previously says how many other commits
//! landed in between. If that gap exceeds `L` while the client still has
//! budget to continue, the group stops drifting and holds a forced
//! synchronization: the triggering client plus every busy client whose
//! running update still finishes inside the budget each train one update
//! from their own current models; the results are averaged at the barrier
//! time `T_b` (the latest finish) and pushed back to all participants,
//! whose version gaps reset to zero. Busy clients join only after their
//! running update commits, so no work is discarded.
//!
//! The seven protocol names wire those pieces together:
//!
//! | protocol     | grouping          | discipline                  |
//! |--------------|-------------------|-----------------------------|
//! | `t-fedavg`   | everyone together | synchronous                 |
//! | `ta-fedavg`  | everyone together | semi-async, no threshold    |
//! | `g-fedavg`   | clustered         | synchronous                 |
//! | `ga-fedavg`  | clustered         | semi-async, no threshold    |
//! | `r-fedavg`   | random            | semi-async (or sync)        |
//! | `nog-fedavg` | everyone together | semi-async with threshold   |
//! | `csafl`      | clustered         | semi-async with threshold   |
//!
//! Client selection, latency draws, and training shuffles each come from
//! their own seeded streams keyed by round and client, never by group, so
//! regrouping the same federation changes nothing else about a run.

mod round;

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::GroupAssignment;
use crate::data::{ClientShard, FederatedDataset, Sample};
use crate::latency::{sample_total_latency_ms, ClientProfile, NoiseBandwidth, ProfileSet, RadioSystem};
use crate::model::{evaluate, ModelParams, TrainingConfig};
use crate::rng::{stream, StreamKind};
use crate::{Error, Result};

pub(crate) use round::UpdateRule;

/// The simulated aggregation protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "t-fedavg")]
    TFedAvg,
    #[serde(rename = "ta-fedavg")]
    TaFedAvg,
    #[serde(rename = "g-fedavg")]
    GFedAvg,
    #[serde(rename = "ga-fedavg")]
    GaFedAvg,
    #[serde(rename = "r-fedavg")]
    RFedAvg,
    #[serde(rename = "nog-fedavg")]
    NogFedAvg,
    #[serde(rename = "csafl")]
    Csafl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Grouping {
    Global,
    Clustered,
    Random,
}

impl Protocol {
    pub const ALL: [Protocol; 7] = [
        Protocol::TFedAvg,
        Protocol::TaFedAvg,
        Protocol::GFedAvg,
        Protocol::GaFedAvg,
        Protocol::RFedAvg,
        Protocol::NogFedAvg,
        Protocol::Csafl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::TFedAvg => "t-fedavg",
            Protocol::TaFedAvg => "ta-fedavg",
            Protocol::GFedAvg => "g-fedavg",
            Protocol::GaFedAvg => "ga-fedavg",
            Protocol::RFedAvg => "r-fedavg",
            Protocol::NogFedAvg => "nog-fedavg",
            Protocol::Csafl => "csafl",
        }
    }

    /// True when the protocol expects a precomputed group assignment.
    pub fn needs_assignment(&self) -> bool {
        matches!(self.grouping(), Grouping::Clustered)
    }

    fn grouping(&self) -> Grouping {
        match self {
            Protocol::TFedAvg | Protocol::TaFedAvg | Protocol::NogFedAvg => Grouping::Global,
            Protocol::GFedAvg | Protocol::GaFedAvg | Protocol::Csafl => Grouping::Clustered,
            Protocol::RFedAvg => Grouping::Random,
        }
    }

    fn update_rule(&self, cfg: &SimConfig) -> UpdateRule {
        match self {
            Protocol::TFedAvg | Protocol::GFedAvg => UpdateRule::Sync,
            Protocol::TaFedAvg | Protocol::GaFedAvg => UpdateRule::SemiAsync { trigger: None },
            Protocol::RFedAvg => match cfg.r_fedavg_update {
                RFedAvgUpdate::Sync => UpdateRule::Sync,
                RFedAvgUpdate::SemiAsync => UpdateRule::SemiAsync { trigger: None },
            },
            Protocol::NogFedAvg | Protocol::Csafl => UpdateRule::SemiAsync {
                trigger: Some(cfg.delay_threshold),
            },
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .iter()
            .find(|p| p.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Protocol::ALL.iter().map(|p| p.as_str()).collect();
                Error::config(format!(
                    "unknown protocol '{s}', expected one of: {}",
                    names.join(", ")
                ))
            })
    }
}

/// How a semi-asynchronous commit lands in the group model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CommitMode {
    /// The committed model becomes the group model.
    #[default]
    Replace,
    /// `group <- a * committed + (1 - a) * group` for a fixed `a` in (0, 1].
    Mix(f64),
}

impl CommitMode {
    pub fn validate(&self) -> Result<()> {
        if let CommitMode::Mix(a) = self {
            if !(a.is_finite() && *a > 0.0 && *a <= 1.0) {
                return Err(Error::config(format!(
                    "mix factor must lie in (0, 1], got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// When a client's latency is redrawn from its distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatencyRedraw {
    /// Every update draws a fresh computation time (default).
    #[default]
    PerUpdate,
    /// One draw per round per client, reused for all its updates.
    PerRound,
}

/// Update discipline for the random-grouping baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RFedAvgUpdate {
    #[default]
    SemiAsync,
    Sync,
}

/// Everything a run needs besides the federation and the latencies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub protocol: Protocol,
    /// Number of rounds `T`.
    pub rounds: usize,
    /// Per-round time budget `H` in virtual milliseconds.
    pub budget_ms: u64,
    /// Staleness threshold `L` for the protocols that use one.
    pub delay_threshold: u64,
    /// Clients selected per round (across all groups).
    pub clients_per_round: usize,
    pub training: TrainingConfig,
    pub seed: u64,
    #[serde(default)]
    pub commit_mode: CommitMode,
    /// After a commit, train on from the merged group model instead of the
    /// model just pushed. Indistinguishable under `CommitMode::Replace`.
    #[serde(default)]
    pub pull_on_commit: bool,
    #[serde(default)]
    pub latency_redraw: LatencyRedraw,
    /// Group count for random grouping; ignored by the other protocols.
    #[serde(default = "default_n_groups")]
    pub n_groups: usize,
    #[serde(default)]
    pub r_fedavg_update: RFedAvgUpdate,
}

fn default_n_groups() -> usize {
    1
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if self.budget_ms == 0 {
            return Err(Error::config("budget_ms must be >= 1"));
        }
        if self.clients_per_round == 0 {
            return Err(Error::config("clients_per_round must be >= 1"));
        }
        if self.protocol == Protocol::RFedAvg && self.n_groups == 0 {
            return Err(Error::config("n_groups must be >= 1 for random grouping"));
        }
        self.commit_mode.validate()?;
        self.training.validate()
    }
}

/// Where update latencies come from.
#[derive(Debug, Clone)]
pub enum LatencyProvider {
    /// The full physical model: exponential computation overshoot plus a
    /// deterministic link-budget transmission time.
    Model {
        profiles: ProfileSet,
        noise_bandwidth: NoiseBandwidth,
    },
    /// A fixed latency per client; every update takes exactly this long.
    Fixed { latency_ms: BTreeMap<usize, f64> },
}

impl LatencyProvider {
    pub fn validate(&self) -> Result<()> {
        match self {
            LatencyProvider::Model { profiles, .. } => profiles.validate(),
            LatencyProvider::Fixed { latency_ms } => {
                for (c, &l) in latency_ms {
                    if !(l > 0.0 && l.is_finite()) {
                        return Err(Error::config(format!(
                            "fixed latency for client {c} must be finite and > 0, got {l}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    fn stream_for(
        &self,
        seed: u64,
        round: usize,
        client: usize,
        redraw: LatencyRedraw,
    ) -> Result<ClientLatencyStream> {
        match self {
            LatencyProvider::Fixed { latency_ms } => latency_ms
                .get(&client)
                .copied()
                .map(ClientLatencyStream::Fixed)
                .ok_or_else(|| Error::config(format!("no fixed latency for client {client}"))),
            LatencyProvider::Model {
                profiles,
                noise_bandwidth,
            } => {
                let profile = profiles
                    .clients
                    .iter()
                    .find(|p| p.client_id == client)
                    .ok_or_else(|| {
                        Error::config(format!("no latency profile for client {client}"))
                    })?
                    .clone();
                Ok(ClientLatencyStream::Model(Box::new(ModelStream {
                    rng: stream(seed, StreamKind::Latency, &[round as u64, client as u64]),
                    profile,
                    system: profiles.system.clone(),
                    noise_bandwidth: *noise_bandwidth,
                    per_round: redraw == LatencyRedraw::PerRound,
                    cached: None,
                })))
            }
        }
    }
}

/// One client's latency draws within one round, consumed update by update.
pub(crate) enum ClientLatencyStream {
    Fixed(f64),
    Model(Box<ModelStream>),
}

pub(crate) struct ModelStream {
    rng: ChaCha20Rng,
    profile: ClientProfile,
    system: RadioSystem,
    noise_bandwidth: NoiseBandwidth,
    per_round: bool,
    cached: Option<f64>,
}

impl ClientLatencyStream {
    pub(crate) fn next_ms(&mut self) -> f64 {
        match self {
            ClientLatencyStream::Fixed(l) => *l,
            ClientLatencyStream::Model(s) => {
                if s.per_round {
                    if let Some(l) = s.cached {
                        return l;
                    }
                }
                let l =
                    sample_total_latency_ms(&s.profile, &s.system, s.noise_bandwidth, &mut s.rng);
                s.cached = Some(l);
                l
            }
        }
    }
}

/// What happened at one virtual instant in one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// A client merged its update into the group model.
    AsyncCommit,
    /// A client finished its update for a synchronization barrier.
    SyncBarrier,
    /// A barrier participant received the aggregated model.
    Download,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::AsyncCommit => "async_commit",
            EventKind::SyncBarrier => "sync_barrier",
            EventKind::Download => "download",
        }
    }
}

impl std::str::FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "async_commit" => Ok(EventKind::AsyncCommit),
            "sync_barrier" => Ok(EventKind::SyncBarrier),
            "download" => Ok(EventKind::Download),
            other => Err(Error::config(format!("unknown event kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommitEvent {
    pub time_ms: f64,
    pub round: usize,
    pub group_id: usize,
    pub client_id: usize,
    pub kind: EventKind,
    pub group_version: u64,
}

/// Time a barrier participant spent waiting for the slowest member.
#[derive(Debug, Clone, PartialEq)]
pub struct IdleRecord {
    pub round: usize,
    pub client_id: usize,
    pub idle_ms: f64,
}

/// The version gap a client saw when it was allowed to start an update.
#[derive(Debug, Clone, PartialEq)]
pub struct StalenessCheck {
    pub round: usize,
    pub client_id: usize,
    pub time_ms: f64,
    pub delta_v: u64,
}

/// Per-round, per-group evaluation and activity counters.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundGroupMetrics {
    pub round: usize,
    pub group_id: usize,
    /// Accuracy of the group model on the pooled test data of all group
    /// members (selected or not). Zero when the pool is empty.
    pub accuracy: f64,
    /// Mean cross-entropy on the same pool; NaN when the pool is empty.
    pub mean_loss: f64,
    pub test_samples: usize,
    /// Commit events this round (asynchronous and barrier together).
    pub commits: usize,
    pub forced_syncs: usize,
}

/// Everything a run produces, before any of it goes to disk.
#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub protocol: Protocol,
    pub assignment: GroupAssignment,
    pub metrics: Vec<RoundGroupMetrics>,
    pub events: Vec<CommitEvent>,
    pub idle: Vec<IdleRecord>,
    pub staleness: Vec<StalenessCheck>,
    /// Test-sample-weighted accuracy across groups, one entry per round.
    pub global_accuracy: Vec<f64>,
    pub final_models: Vec<ModelParams>,
}

/// Draws `k` distinct clients uniformly, returned in ascending order.
/// Asking for everyone (or more) returns everyone without consuming
/// randomness.
pub fn select_clients(num_clients: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if k >= num_clients {
        return (0..num_clients).collect();
    }
    let mut ids: Vec<usize> = (0..num_clients).collect();
    for i in 0..k {
        let j = rng.gen_range(i..num_clients);
        ids.swap(i, j);
    }
    let mut out: Vec<usize> = ids[..k].to_vec();
    out.sort_unstable();
    out
}

/// Runs the full experiment: `cfg.rounds` rounds over every group, with a
/// shared per-round client selection. Deterministic in the configuration.
pub fn run_experiment(
    dataset: &FederatedDataset,
    provider: &LatencyProvider,
    assignment: Option<&GroupAssignment>,
    cfg: &SimConfig,
) -> Result<SimulationTrace> {
    cfg.validate()?;
    dataset.validate()?;
    provider.validate()?;

    let n = dataset.num_clients();
    let grouping = match cfg.protocol.grouping() {
        Grouping::Global => GroupAssignment::global(n)?,
        Grouping::Clustered => assignment
            .ok_or_else(|| {
                Error::config(format!(
                    "protocol {} requires a group assignment",
                    cfg.protocol
                ))
            })?
            .clone(),
        Grouping::Random => GroupAssignment::random(n, cfg.n_groups, cfg.seed)?,
    };
    if grouping.num_clients() != n {
        return Err(Error::config(format!(
            "assignment covers {} clients but the dataset has {n}",
            grouping.num_clients()
        )));
    }
    for shard in &dataset.shards {
        if grouping.group_of(shard.client_id).is_none() {
            return Err(Error::config(format!(
                "client {} has no group in the assignment",
                shard.client_id
            )));
        }
    }

    let n_groups = grouping.n_groups();
    let shards_by_id: BTreeMap<usize, &ClientShard> =
        dataset.shards.iter().map(|s| (s.client_id, s)).collect();
    let members_of: Vec<Vec<usize>> = (0..n_groups).map(|g| grouping.members(g)).collect();
    let pooled_test: Vec<Vec<Sample>> = members_of
        .iter()
        .map(|members| {
            members
                .iter()
                .flat_map(|c| shards_by_id[c].test.iter().cloned())
                .collect()
        })
        .collect();

    let rule = cfg.protocol.update_rule(cfg);
    let mut models: Vec<ModelParams> =
        vec![ModelParams::zeros(dataset.num_classes, dataset.feature_dim); n_groups];

    let mut metrics = Vec::with_capacity(cfg.rounds * n_groups);
    let mut events = Vec::new();
    let mut idle = Vec::new();
    let mut staleness = Vec::new();
    let mut global_accuracy = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let mut sel_rng = stream(cfg.seed, StreamKind::Selection, &[round as u64]);
        let selected: BTreeSet<usize> =
            select_clients(n, cfg.clients_per_round, &mut sel_rng).into_iter().collect();

        let mut weighted_acc = 0.0;
        let mut weight_sum = 0.0;
        for g in 0..n_groups {
            let members: Vec<usize> = members_of[g]
                .iter()
                .copied()
                .filter(|c| selected.contains(c))
                .collect();
            let mut latency = BTreeMap::new();
            let mut shards = BTreeMap::new();
            for &c in &members {
                latency.insert(c, provider.stream_for(cfg.seed, round, c, cfg.latency_redraw)?);
                shards.insert(c, shards_by_id[&c]);
            }

            let out = round::run_group_round(
                round::GroupRound {
                    round,
                    group_id: g,
                    members,
                    shards,
                    model: models[g].clone(),
                    latency,
                },
                &rule,
                cfg,
            )?;
            models[g] = out.model;
            events.extend(out.events);
            idle.extend(out.idle);
            staleness.extend(out.staleness);

            let (accuracy, mean_loss) = if pooled_test[g].is_empty() {
                (0.0, f64::NAN)
            } else {
                evaluate(&models[g], &pooled_test[g])?
            };
            weighted_acc += accuracy * pooled_test[g].len() as f64;
            weight_sum += pooled_test[g].len() as f64;
            metrics.push(RoundGroupMetrics {
                round,
                group_id: g,
                accuracy,
                mean_loss,
                test_samples: pooled_test[g].len(),
                commits: out.commits,
                forced_syncs: out.forced_syncs,
            });
        }
        global_accuracy.push(if weight_sum > 0.0 {
            weighted_acc / weight_sum
        } else {
            0.0
        });
    }

    Ok(SimulationTrace {
        protocol: cfg.protocol,
        assignment: grouping,
        metrics,
        events,
        idle,
        staleness,
        global_accuracy,
        final_models: models,
    })
}

#[cfg(test)]
mod tests;
