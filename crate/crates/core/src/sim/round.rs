//! The two per-group round engines.
//!
//! Both run in virtual time starting at zero. An update may start only
//! while the clock is strictly below the budget; one already running when
//! the budget expires completes and commits. Commit events are replayed
//! from a priority queue ordered by finish time, ties by client id, so a
//! round is a pure function of its inputs.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use crate::data::ClientShard;
use crate::model::{client_update, fedavg_aggregate, ModelParams};
use crate::rng::training_seed;
use crate::{Error, Result};

use super::{
    ClientLatencyStream, CommitEvent, CommitMode, EventKind, IdleRecord, SimConfig,
    StalenessCheck,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UpdateRule {
    Sync,
    SemiAsync { trigger: Option<u64> },
}

pub(crate) struct GroupRound<'a> {
    pub round: usize,
    pub group_id: usize,
    /// Selected members of this group, ascending client id.
    pub members: Vec<usize>,
    pub shards: BTreeMap<usize, &'a ClientShard>,
    /// Group model at the start of the round.
    pub model: ModelParams,
    pub latency: BTreeMap<usize, ClientLatencyStream>,
}

pub(crate) struct GroupRoundOutput {
    pub model: ModelParams,
    pub events: Vec<CommitEvent>,
    pub idle: Vec<IdleRecord>,
    pub staleness: Vec<StalenessCheck>,
    pub commits: usize,
    pub forced_syncs: usize,
}

pub(crate) fn run_group_round(
    input: GroupRound,
    rule: &UpdateRule,
    cfg: &SimConfig,
) -> Result<GroupRoundOutput> {
    match rule {
        UpdateRule::Sync => sync_round(input, cfg),
        UpdateRule::SemiAsync { trigger } => SemiAsyncEngine::new(input, cfg, *trigger)?.run(),
    }
}

fn checked_latency(lat: f64, client: usize) -> Result<f64> {
    if lat.is_finite() && lat > 0.0 {
        Ok(lat)
    } else {
        Err(Error::degenerate(format!(
            "client {client} drew a non-positive latency of {lat} ms"
        )))
    }
}

fn mix_into(model: &mut ModelParams, committed: &ModelParams, alpha: f64) {
    model
        .weights
        .zip_mut_with(&committed.weights, |m, &c| *m = alpha * c + (1.0 - alpha) * *m);
    model
        .bias
        .zip_mut_with(&committed.bias, |m, &c| *m = alpha * c + (1.0 - alpha) * *m);
}

/// Synchronous rounds: train everyone from the group model, wait for the
/// slowest, average, and repeat while the barrier lands inside the budget.
fn sync_round(input: GroupRound, cfg: &SimConfig) -> Result<GroupRoundOutput> {
    let GroupRound {
        round,
        group_id,
        members,
        shards,
        mut model,
        mut latency,
    } = input;

    let mut out = GroupRoundOutput {
        model: ModelParams::zeros(0, 0),
        events: Vec::new(),
        idle: Vec::new(),
        staleness: Vec::new(),
        commits: 0,
        forced_syncs: 0,
    };
    if members.is_empty() {
        out.model = model;
        return Ok(out);
    }

    let h = cfg.budget_ms as f64;
    let mut v_group = 0u64;
    let mut update_idx: BTreeMap<usize, u64> = members.iter().map(|&c| (c, 0)).collect();
    let mut t = 0.0;

    while t < h {
        let mut legs: Vec<(f64, usize, ModelParams)> = Vec::with_capacity(members.len());
        for &c in &members {
            let idx = update_idx.get_mut(&c).expect("member has an update index");
            let trained = client_update(
                &model,
                &shards[&c].train,
                &cfg.training,
                training_seed(cfg.seed, round as u64, c as u64, *idx),
            )?;
            *idx += 1;
            let lat = checked_latency(latency.get_mut(&c).expect("member latency").next_ms(), c)?;
            legs.push((t + lat, c, trained));
        }
        legs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let t_b = legs.last().expect("at least one leg").0;

        for (finish, c, _) in &legs {
            v_group += 1;
            out.events.push(CommitEvent {
                time_ms: *finish,
                round,
                group_id,
                client_id: *c,
                kind: EventKind::SyncBarrier,
                group_version: v_group,
            });
            out.commits += 1;
        }
        let mut by_id: Vec<(usize, f64)> = legs.iter().map(|(f, c, _)| (*c, *f)).collect();
        by_id.sort_unstable_by_key(|(c, _)| *c);
        for (c, finish) in by_id {
            out.events.push(CommitEvent {
                time_ms: t_b,
                round,
                group_id,
                client_id: c,
                kind: EventKind::Download,
                group_version: v_group,
            });
            out.idle.push(IdleRecord {
                round,
                client_id: c,
                idle_ms: t_b - finish,
            });
        }

        let contributions: Vec<(ModelParams, usize)> = legs
            .into_iter()
            .map(|(_, c, trained)| {
                let n = shards[&c].train.len();
                (trained, n)
            })
            .collect();
        model = fedavg_aggregate(&contributions)?;
        t = t_b;
    }

    out.model = model;
    Ok(out)
}

struct ClientState {
    /// The model this client trains from next: its own last committed
    /// update (or the merged model when pulling on commit), or the barrier
    /// aggregate after a forced synchronization.
    w_last: ModelParams,
    /// Group version at this client's previous commit.
    v_prev: u64,
    /// Group version at this client's latest commit.
    v_new: u64,
    update_idx: u64,
}

struct InFlight {
    finish_ms: f64,
    trained: ModelParams,
}

#[derive(Debug, PartialEq)]
struct Pending {
    finish_ms: f64,
    client: usize,
    sync_leg: bool,
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.finish_ms
            .total_cmp(&other.finish_ms)
            .then(self.client.cmp(&other.client))
    }
}

enum Mode {
    Async,
    /// A forced synchronization in progress. Staleness checks are
    /// suspended until the barrier completes.
    Syncing {
        /// Busy participants whose running update has not committed yet.
        awaiting_join: BTreeSet<usize>,
        /// Participants whose barrier update has not finished yet.
        remaining: usize,
        /// Finish time and result of each completed barrier update.
        done_legs: BTreeMap<usize, (f64, ModelParams)>,
    },
}

struct SemiAsyncEngine<'a> {
    round: usize,
    group_id: usize,
    shards: BTreeMap<usize, &'a ClientShard>,
    latency: BTreeMap<usize, ClientLatencyStream>,
    cfg: &'a SimConfig,
    trigger: Option<u64>,
    h: f64,
    model: ModelParams,
    v_group: u64,
    states: BTreeMap<usize, ClientState>,
    inflight: BTreeMap<usize, InFlight>,
    queue: BinaryHeap<Reverse<Pending>>,
    mode: Mode,
    events: Vec<CommitEvent>,
    idle: Vec<IdleRecord>,
    staleness: Vec<StalenessCheck>,
    commits: usize,
    forced_syncs: usize,
}

impl<'a> SemiAsyncEngine<'a> {
    fn new(input: GroupRound<'a>, cfg: &'a SimConfig, trigger: Option<u64>) -> Result<Self> {
        let GroupRound {
            round,
            group_id,
            members,
            shards,
            model,
            latency,
        } = input;
        let states = members
            .iter()
            .map(|&c| {
                (
                    c,
                    ClientState {
                        w_last: model.clone(),
                        v_prev: 0,
                        v_new: 0,
                        update_idx: 0,
                    },
                )
            })
            .collect();
        Ok(SemiAsyncEngine {
            round,
            group_id,
            shards,
            latency,
            cfg,
            trigger,
            h: cfg.budget_ms as f64,
            model,
            v_group: 0,
            states,
            inflight: BTreeMap::new(),
            queue: BinaryHeap::new(),
            mode: Mode::Async,
            events: Vec::new(),
            idle: Vec::new(),
            staleness: Vec::new(),
            commits: 0,
            forced_syncs: 0,
        })
    }

    fn run(mut self) -> Result<GroupRoundOutput> {
        let members: Vec<usize> = self.states.keys().copied().collect();
        for &c in &members {
            self.start_async(c, 0.0)?;
        }
        while let Some(Reverse(p)) = self.queue.pop() {
            let fl = self
                .inflight
                .remove(&p.client)
                .expect("popped client has an in-flight update");
            if p.sync_leg {
                self.finish_sync_leg(p.client, p.finish_ms, fl.trained)?;
            } else {
                self.finish_async(p.client, p.finish_ms, fl.trained)?;
            }
        }
        debug_assert!(
            matches!(self.mode, Mode::Async),
            "round ended inside a forced synchronization"
        );
        Ok(GroupRoundOutput {
            model: self.model,
            events: self.events,
            idle: self.idle,
            staleness: self.staleness,
            commits: self.commits,
            forced_syncs: self.forced_syncs,
        })
    }

    fn start_async(&mut self, c: usize, now: f64) -> Result<()> {
        debug_assert!(now < self.h, "asynchronous updates never start past the budget");
        let shard = *self.shards.get(&c).expect("member shard");
        let (delta_v, trained) = {
            let st = self.states.get_mut(&c).expect("member state");
            let trained = client_update(
                &st.w_last,
                &shard.train,
                &self.cfg.training,
                training_seed(self.cfg.seed, self.round as u64, c as u64, st.update_idx),
            )?;
            st.update_idx += 1;
            (st.v_new - st.v_prev, trained)
        };
        let lat = checked_latency(
            self.latency.get_mut(&c).expect("member latency").next_ms(),
            c,
        )?;
        let finish = now + lat;
        self.inflight.insert(
            c,
            InFlight {
                finish_ms: finish,
                trained,
            },
        );
        self.queue.push(Reverse(Pending {
            finish_ms: finish,
            client: c,
            sync_leg: false,
        }));
        self.staleness.push(StalenessCheck {
            round: self.round,
            client_id: c,
            time_ms: now,
            delta_v,
        });
        Ok(())
    }

    fn start_sync_leg(&mut self, c: usize, now: f64) -> Result<()> {
        let shard = *self.shards.get(&c).expect("member shard");
        let trained = {
            let st = self.states.get_mut(&c).expect("member state");
            let trained = client_update(
                &st.w_last,
                &shard.train,
                &self.cfg.training,
                training_seed(self.cfg.seed, self.round as u64, c as u64, st.update_idx),
            )?;
            st.update_idx += 1;
            trained
        };
        let lat = checked_latency(
            self.latency.get_mut(&c).expect("member latency").next_ms(),
            c,
        )?;
        let finish = now + lat;
        self.inflight.insert(
            c,
            InFlight {
                finish_ms: finish,
                trained,
            },
        );
        self.queue.push(Reverse(Pending {
            finish_ms: finish,
            client: c,
            sync_leg: true,
        }));
        Ok(())
    }

    /// Merge a finished update into the group model and advance the
    /// version counters.
    fn apply_commit(&mut self, c: usize, now: f64, trained: ModelParams) {
        self.v_group += 1;
        match self.cfg.commit_mode {
            CommitMode::Replace => self.model = trained.clone(),
            CommitMode::Mix(alpha) => mix_into(&mut self.model, &trained, alpha),
        }
        self.events.push(CommitEvent {
            time_ms: now,
            round: self.round,
            group_id: self.group_id,
            client_id: c,
            kind: EventKind::AsyncCommit,
            group_version: self.v_group,
        });
        self.commits += 1;
        let pulled = if self.cfg.pull_on_commit {
            self.model.clone()
        } else {
            trained
        };
        let st = self.states.get_mut(&c).expect("member state");
        st.v_prev = st.v_new;
        st.v_new = self.v_group;
        st.w_last = pulled;
    }

    fn finish_async(&mut self, c: usize, now: f64, trained: ModelParams) -> Result<()> {
        self.apply_commit(c, now, trained);

        enum Next {
            StartLeg,
            Stop,
            CheckStaleness,
        }
        let next = match &mut self.mode {
            Mode::Syncing { awaiting_join, .. } => {
                if awaiting_join.remove(&c) {
                    Next::StartLeg
                } else {
                    // Not enlisted, so this update was already going to
                    // outlive the budget.
                    debug_assert!(now >= self.h);
                    Next::Stop
                }
            }
            Mode::Async => Next::CheckStaleness,
        };
        match next {
            Next::StartLeg => self.start_sync_leg(c, now),
            Next::Stop => Ok(()),
            Next::CheckStaleness => {
                if now >= self.h {
                    return Ok(());
                }
                let st = &self.states[&c];
                match self.trigger {
                    Some(l) if st.v_new - st.v_prev > l => self.begin_forced_sync(c, now),
                    _ => self.start_async(c, now),
                }
            }
        }
    }

    fn begin_forced_sync(&mut self, trigger_client: usize, now: f64) -> Result<()> {
        self.forced_syncs += 1;
        let awaiting_join: BTreeSet<usize> = self
            .inflight
            .iter()
            .filter(|(_, fl)| fl.finish_ms < self.h)
            .map(|(&c, _)| c)
            .collect();
        self.mode = Mode::Syncing {
            remaining: awaiting_join.len() + 1,
            awaiting_join,
            done_legs: BTreeMap::new(),
        };
        self.start_sync_leg(trigger_client, now)
    }

    fn finish_sync_leg(&mut self, c: usize, now: f64, trained: ModelParams) -> Result<()> {
        self.v_group += 1;
        self.events.push(CommitEvent {
            time_ms: now,
            round: self.round,
            group_id: self.group_id,
            client_id: c,
            kind: EventKind::SyncBarrier,
            group_version: self.v_group,
        });
        self.commits += 1;
        let barrier_complete = match &mut self.mode {
            Mode::Syncing {
                remaining,
                done_legs,
                ..
            } => {
                done_legs.insert(c, (now, trained));
                *remaining -= 1;
                *remaining == 0
            }
            Mode::Async => unreachable!("sync leg finished outside a barrier"),
        };
        if barrier_complete {
            self.complete_barrier(now)?;
        }
        Ok(())
    }

    /// The queue is time-ordered, so the barrier completes exactly when
    /// the last participant's update finishes; that instant is `T_b`.
    fn complete_barrier(&mut self, t_b: f64) -> Result<()> {
        let done_legs = match std::mem::replace(&mut self.mode, Mode::Async) {
            Mode::Syncing { done_legs, .. } => done_legs,
            Mode::Async => unreachable!("no barrier to complete"),
        };
        let contributions: Vec<(ModelParams, usize)> = done_legs
            .iter()
            .map(|(c, (_, trained))| (trained.clone(), self.shards[c].train.len()))
            .collect();
        self.model = fedavg_aggregate(&contributions)?;

        for (&c, &(finish, _)) in &done_legs {
            self.events.push(CommitEvent {
                time_ms: t_b,
                round: self.round,
                group_id: self.group_id,
                client_id: c,
                kind: EventKind::Download,
                group_version: self.v_group,
            });
            self.idle.push(IdleRecord {
                round: self.round,
                client_id: c,
                idle_ms: t_b - finish,
            });
            let st = self.states.get_mut(&c).expect("member state");
            st.w_last = self.model.clone();
            st.v_prev = self.v_group;
            st.v_new = self.v_group;
        }
        for &c in done_legs.keys() {
            if t_b < self.h {
                self.start_async(c, t_b)?;
            }
        }
        Ok(())
    }
}
