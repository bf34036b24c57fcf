use std::collections::BTreeMap;

use super::*;
use crate::cluster::GroupAssignment;
use crate::data::{generate_synthetic, PowerLaw, SyntheticConfig};
use crate::latency::{generate_profiles, ClientProfile, ProfileRanges, RadioSystem};
use crate::model::{client_update, fedavg_aggregate};
use crate::rng::training_seed;

fn tiny_dataset(num_clients: usize, seed: u64) -> FederatedDataset {
    generate_synthetic(&SyntheticConfig {
        alpha: 1.0,
        beta: 0.5,
        num_clients,
        feature_dim: 4,
        num_classes: 3,
        samples: PowerLaw {
            min_per_client: 20,
            exponent: 1.0,
            total_samples: 30 * num_clients,
        },
        test_fraction: 0.25,
        seed,
    })
    .unwrap()
}

fn fixed(latencies: &[(usize, f64)]) -> LatencyProvider {
    LatencyProvider::Fixed {
        latency_ms: latencies.iter().copied().collect(),
    }
}

fn sim_cfg(protocol: Protocol) -> SimConfig {
    SimConfig {
        protocol,
        rounds: 1,
        budget_ms: 15_000,
        delay_threshold: 1,
        clients_per_round: 64,
        training: TrainingConfig {
            learning_rate: 0.05,
            batch_size: 8,
            local_epochs: 1,
        },
        seed: 42,
        commit_mode: CommitMode::Replace,
        pull_on_commit: false,
        latency_redraw: LatencyRedraw::PerUpdate,
        n_groups: 1,
        r_fedavg_update: RFedAvgUpdate::default(),
    }
}

fn ev(time_ms: f64, client_id: usize, kind: EventKind, group_version: u64) -> CommitEvent {
    CommitEvent {
        time_ms,
        round: 0,
        group_id: 0,
        client_id,
        kind,
        group_version,
    }
}

/// Everything except the protocol label must match.
fn assert_same_behavior(a: &SimulationTrace, b: &SimulationTrace) {
    assert_eq!(a.events, b.events);
    assert_eq!(a.idle, b.idle);
    assert_eq!(a.staleness, b.staleness);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.global_accuracy, b.global_accuracy);
    assert_eq!(a.final_models, b.final_models);
}

#[test]
fn test_select_clients_everyone_when_k_covers_all() {
    let mut rng = stream(1, StreamKind::Selection, &[0]);
    assert_eq!(select_clients(5, 5, &mut rng), vec![0, 1, 2, 3, 4]);
    assert_eq!(select_clients(5, 9, &mut rng), vec![0, 1, 2, 3, 4]);
}

#[test]
fn test_select_clients_uniform_frequency() {
    let n = 10;
    let k = 5;
    let rounds = 2000;
    let mut hits = vec![0usize; n];
    for round in 0..rounds {
        let mut rng = stream(7, StreamKind::Selection, &[round]);
        let picked = select_clients(n, k, &mut rng);
        assert_eq!(picked.len(), k);
        assert!(picked.windows(2).all(|w| w[0] < w[1]), "sorted and distinct");
        for c in picked {
            hits[c] += 1;
        }
    }
    for (c, &h) in hits.iter().enumerate() {
        let freq = h as f64 / rounds as f64;
        assert!(
            (freq - 0.5).abs() < 0.03,
            "client {c} selected with frequency {freq}, expected about 0.5"
        );
    }
}

#[test]
fn test_plain_async_single_client_runs_to_budget() {
    let ds = tiny_dataset(1, 3);
    let cfg = sim_cfg(Protocol::TaFedAvg);
    let trace = run_experiment(&ds, &fixed(&[(0, 5000.0)]), None, &cfg).unwrap();

    assert_eq!(
        trace.events,
        vec![
            ev(5000.0, 0, EventKind::AsyncCommit, 1),
            ev(10000.0, 0, EventKind::AsyncCommit, 2),
            ev(15000.0, 0, EventKind::AsyncCommit, 3),
        ]
    );
    assert!(trace.idle.is_empty());
    assert_eq!(trace.metrics.len(), 1);
    assert_eq!(trace.metrics[0].commits, 3);
    assert_eq!(trace.metrics[0].forced_syncs, 0);
    assert_eq!(trace.global_accuracy, vec![trace.metrics[0].accuracy]);

    // The final model is three local updates chained through the client's
    // own copy, one training stream per update index.
    let step = |m: &ModelParams, idx: u64| {
        client_update(
            m,
            &ds.shards[0].train,
            &cfg.training,
            training_seed(cfg.seed, 0, 0, idx),
        )
        .unwrap()
    };
    let w0 = ModelParams::zeros(ds.num_classes, ds.feature_dim);
    let expected = step(&step(&step(&w0, 0), 1), 2);
    assert_eq!(trace.final_models[0], expected);
}

#[test]
fn test_budget_is_strict_at_commit_time() {
    let ds = tiny_dataset(1, 3);
    let cfg = sim_cfg(Protocol::TaFedAvg);

    // Latency exactly equal to the budget: the first update commits at H
    // and nothing restarts.
    let trace = run_experiment(&ds, &fixed(&[(0, 15_000.0)]), None, &cfg).unwrap();
    assert_eq!(trace.events.len(), 1);

    // A hair under the budget: the second update starts at 14999.5 and
    // commits well past H.
    let trace = run_experiment(&ds, &fixed(&[(0, 14_999.5)]), None, &cfg).unwrap();
    assert_eq!(trace.events.len(), 2);
    assert_eq!(trace.events[1].time_ms, 29_999.0);
}

/// Two clients, fixed latencies 2000 and 7000 ms, threshold 1, budget
/// 15000 ms. The fast client commits three times before the slow one's
/// first commit lands with a version gap of 4, forcing a synchronization:
/// the slow client joins at 7000, the fast one finishes its running
/// update, commits it at 8000, and joins; their barrier updates finish at
/// 10000 and 14000, so the barrier closes at 14000 and both download the
/// average. Both then restart inside the budget and their last updates
/// commit past it.
#[test]
fn test_forced_sync_replays_hand_schedule() {
    let ds = tiny_dataset(2, 5);
    let cfg = sim_cfg(Protocol::Csafl);
    let assignment = GroupAssignment::global(2).unwrap();
    let trace = run_experiment(
        &ds,
        &fixed(&[(0, 2000.0), (1, 7000.0)]),
        Some(&assignment),
        &cfg,
    )
    .unwrap();

    assert_eq!(
        trace.events,
        vec![
            ev(2000.0, 0, EventKind::AsyncCommit, 1),
            ev(4000.0, 0, EventKind::AsyncCommit, 2),
            ev(6000.0, 0, EventKind::AsyncCommit, 3),
            ev(7000.0, 1, EventKind::AsyncCommit, 4),
            ev(8000.0, 0, EventKind::AsyncCommit, 5),
            ev(10000.0, 0, EventKind::SyncBarrier, 6),
            ev(14000.0, 1, EventKind::SyncBarrier, 7),
            ev(14000.0, 0, EventKind::Download, 7),
            ev(14000.0, 1, EventKind::Download, 7),
            ev(16000.0, 0, EventKind::AsyncCommit, 8),
            ev(21000.0, 1, EventKind::AsyncCommit, 9),
        ]
    );
    assert_eq!(
        trace.idle,
        vec![
            IdleRecord {
                round: 0,
                client_id: 0,
                idle_ms: 4000.0
            },
            IdleRecord {
                round: 0,
                client_id: 1,
                idle_ms: 0.0
            },
        ]
    );
    assert_eq!(trace.metrics[0].commits, 9);
    assert_eq!(trace.metrics[0].forced_syncs, 1);

    // Every recorded start saw a version gap within the threshold; the
    // barrier restarts reset the gap to zero.
    let gaps: Vec<(usize, f64, u64)> = trace
        .staleness
        .iter()
        .map(|s| (s.client_id, s.time_ms, s.delta_v))
        .collect();
    assert_eq!(
        gaps,
        vec![
            (0, 0.0, 0),
            (1, 0.0, 0),
            (0, 2000.0, 1),
            (0, 4000.0, 1),
            (0, 6000.0, 1),
            (0, 14000.0, 0),
            (1, 14000.0, 0),
        ]
    );

    // Replay the whole schedule by hand to pin the final model.
    let w0 = ModelParams::zeros(ds.num_classes, ds.feature_dim);
    let step = |m: &ModelParams, client: usize, idx: u64| {
        client_update(
            m,
            &ds.shards[client].train,
            &cfg.training,
            training_seed(cfg.seed, 0, client as u64, idx),
        )
        .unwrap()
    };
    let a0 = step(&w0, 0, 0);
    let a1 = step(&a0, 0, 1);
    let a2 = step(&a1, 0, 2);
    let a3 = step(&a2, 0, 3);
    let b0 = step(&w0, 1, 0);
    let a4 = step(&a3, 0, 4); // barrier update of the fast client
    let b1 = step(&b0, 1, 1); // barrier update of the slow client
    let aggregate = fedavg_aggregate(&[
        (a4, ds.shards[0].train.len()),
        (b1, ds.shards[1].train.len()),
    ])
    .unwrap();
    let _a5 = step(&aggregate, 0, 5); // commits at 16000, then overwritten
    let b2 = step(&aggregate, 1, 2); // commits last, at 21000
    assert_eq!(trace.final_models[0], b2);
}

#[test]
fn test_trigger_never_fires_for_single_client() {
    let ds = tiny_dataset(1, 9);
    let provider = fixed(&[(0, 5000.0)]);
    let mut with_trigger = sim_cfg(Protocol::Csafl);
    with_trigger.rounds = 2;
    with_trigger.budget_ms = 12_000;
    let mut plain = sim_cfg(Protocol::TaFedAvg);
    plain.rounds = 2;
    plain.budget_ms = 12_000;

    let assignment = GroupAssignment::global(1).unwrap();
    let a = run_experiment(&ds, &provider, Some(&assignment), &with_trigger).unwrap();
    let b = run_experiment(&ds, &provider, None, &plain).unwrap();
    assert_eq!(a.metrics[0].forced_syncs, 0);
    assert_same_behavior(&a, &b);
}

#[test]
fn test_infinite_threshold_never_triggers() {
    let ds = tiny_dataset(4, 11);
    let provider = fixed(&[(0, 1000.0), (1, 2500.0), (2, 4000.0), (3, 900.0)]);
    let assignment = GroupAssignment::from_labels(&[0, 0, 1, 1]).unwrap();

    let mut lenient = sim_cfg(Protocol::Csafl);
    lenient.delay_threshold = u64::MAX;
    lenient.budget_ms = 10_000;
    lenient.rounds = 2;
    let mut no_trigger = sim_cfg(Protocol::GaFedAvg);
    no_trigger.budget_ms = 10_000;
    no_trigger.rounds = 2;

    let a = run_experiment(&ds, &provider, Some(&assignment), &lenient).unwrap();
    let b = run_experiment(&ds, &provider, Some(&assignment), &no_trigger).unwrap();
    assert!(a.metrics.iter().all(|m| m.forced_syncs == 0));
    assert_same_behavior(&a, &b);
}

#[test]
fn test_sync_single_client_chains_through_barriers() {
    let ds = tiny_dataset(1, 13);
    let mut cfg = sim_cfg(Protocol::GFedAvg);
    cfg.budget_ms = 10_000;
    let assignment = GroupAssignment::global(1).unwrap();
    let trace = run_experiment(&ds, &fixed(&[(0, 3000.0)]), Some(&assignment), &cfg).unwrap();

    // Barriers at 3000, 6000, 9000 and 12000; the one starting at 9000 is
    // still inside the budget, the next would not be.
    assert_eq!(
        trace.events,
        vec![
            ev(3000.0, 0, EventKind::SyncBarrier, 1),
            ev(3000.0, 0, EventKind::Download, 1),
            ev(6000.0, 0, EventKind::SyncBarrier, 2),
            ev(6000.0, 0, EventKind::Download, 2),
            ev(9000.0, 0, EventKind::SyncBarrier, 3),
            ev(9000.0, 0, EventKind::Download, 3),
            ev(12000.0, 0, EventKind::SyncBarrier, 4),
            ev(12000.0, 0, EventKind::Download, 4),
        ]
    );
    assert!(trace.idle.iter().all(|r| r.idle_ms == 0.0));

    // Aggregating a single client is the identity, so the result is four
    // chained updates.
    let step = |m: &ModelParams, idx: u64| {
        client_update(
            m,
            &ds.shards[0].train,
            &cfg.training,
            training_seed(cfg.seed, 0, 0, idx),
        )
        .unwrap()
    };
    let w0 = ModelParams::zeros(ds.num_classes, ds.feature_dim);
    let expected = step(&step(&step(&step(&w0, 0), 1), 2), 3);
    assert_eq!(trace.final_models[0], expected);
}

/// Two synchronous clients at 3000 and 9000 ms with a 10000 ms budget: the
/// first barrier lands at 9000, still inside the budget, so a second
/// iteration starts and finishes at 18000. The fast client waits 6000 ms
/// at each barrier.
#[test]
fn test_sync_iterations_stop_at_budget() {
    let ds = tiny_dataset(2, 17);
    let mut cfg = sim_cfg(Protocol::TFedAvg);
    cfg.budget_ms = 10_000;
    let trace = run_experiment(&ds, &fixed(&[(0, 3000.0), (1, 9000.0)]), None, &cfg).unwrap();

    assert_eq!(
        trace.events,
        vec![
            ev(3000.0, 0, EventKind::SyncBarrier, 1),
            ev(9000.0, 1, EventKind::SyncBarrier, 2),
            ev(9000.0, 0, EventKind::Download, 2),
            ev(9000.0, 1, EventKind::Download, 2),
            ev(12000.0, 0, EventKind::SyncBarrier, 3),
            ev(18000.0, 1, EventKind::SyncBarrier, 4),
            ev(18000.0, 0, EventKind::Download, 4),
            ev(18000.0, 1, EventKind::Download, 4),
        ]
    );
    let idle: Vec<(usize, f64)> = trace.idle.iter().map(|r| (r.client_id, r.idle_ms)).collect();
    assert_eq!(idle, vec![(0, 6000.0), (1, 0.0), (0, 6000.0), (1, 0.0)]);

    let step = |m: &ModelParams, client: usize, idx: u64| {
        client_update(
            m,
            &ds.shards[client].train,
            &cfg.training,
            training_seed(cfg.seed, 0, client as u64, idx),
        )
        .unwrap()
    };
    let w0 = ModelParams::zeros(ds.num_classes, ds.feature_dim);
    let n0 = ds.shards[0].train.len();
    let n1 = ds.shards[1].train.len();
    let first = fedavg_aggregate(&[(step(&w0, 0, 0), n0), (step(&w0, 1, 0), n1)]).unwrap();
    let second =
        fedavg_aggregate(&[(step(&first, 0, 1), n0), (step(&first, 1, 1), n1)]).unwrap();
    assert_eq!(trace.final_models[0], second);
}

#[test]
fn test_sync_equal_latencies_idle_free() {
    let ds = tiny_dataset(3, 19);
    let mut cfg = sim_cfg(Protocol::TFedAvg);
    cfg.budget_ms = 3000;
    let trace = run_experiment(
        &ds,
        &fixed(&[(0, 2000.0), (1, 2000.0), (2, 2000.0)]),
        None,
        &cfg,
    )
    .unwrap();
    assert_eq!(trace.idle.len(), 6, "two barriers, three clients each");
    assert!(trace.idle.iter().all(|r| r.idle_ms == 0.0));
}

#[test]
fn test_sync_single_iteration_matches_direct_fedavg() {
    let ds = tiny_dataset(3, 23);
    let mut cfg = sim_cfg(Protocol::TFedAvg);
    cfg.budget_ms = 500;
    let trace = run_experiment(
        &ds,
        &fixed(&[(0, 1000.0), (1, 1000.0), (2, 1000.0)]),
        None,
        &cfg,
    )
    .unwrap();

    let w0 = ModelParams::zeros(ds.num_classes, ds.feature_dim);
    let contributions: Vec<(ModelParams, usize)> = (0..3)
        .map(|c| {
            let trained = client_update(
                &w0,
                &ds.shards[c].train,
                &cfg.training,
                training_seed(cfg.seed, 0, c as u64, 0),
            )
            .unwrap();
            (trained, ds.shards[c].train.len())
        })
        .collect();
    let expected = fedavg_aggregate(&contributions).unwrap();
    assert_eq!(trace.final_models[0], expected);
    assert_eq!(trace.metrics[0].commits, 3);
}

#[test]
fn test_global_sync_matches_grouped_sync_on_one_group() {
    let ds = tiny_dataset(3, 29);
    let provider = fixed(&[(0, 1000.0), (1, 1600.0), (2, 2200.0)]);
    let mut t = sim_cfg(Protocol::TFedAvg);
    t.rounds = 2;
    t.clients_per_round = 2;
    t.budget_ms = 4000;
    let mut g = t.clone();
    g.protocol = Protocol::GFedAvg;

    let assignment = GroupAssignment::global(3).unwrap();
    let a = run_experiment(&ds, &provider, None, &t).unwrap();
    let b = run_experiment(&ds, &provider, Some(&assignment), &g).unwrap();
    assert_same_behavior(&a, &b);
}

#[test]
fn test_global_async_matches_grouped_async_on_one_group() {
    let ds = tiny_dataset(3, 31);
    let provider = fixed(&[(0, 1000.0), (1, 1600.0), (2, 2200.0)]);
    let mut ta = sim_cfg(Protocol::TaFedAvg);
    ta.rounds = 2;
    ta.clients_per_round = 2;
    ta.budget_ms = 4000;
    let mut ga = ta.clone();
    ga.protocol = Protocol::GaFedAvg;

    let assignment = GroupAssignment::global(3).unwrap();
    let a = run_experiment(&ds, &provider, None, &ta).unwrap();
    let b = run_experiment(&ds, &provider, Some(&assignment), &ga).unwrap();
    assert_same_behavior(&a, &b);
}

#[test]
fn test_threshold_protocol_matches_ungrouped_on_one_group() {
    let ds = tiny_dataset(4, 37);
    let provider = fixed(&[(0, 500.0), (1, 600.0), (2, 700.0), (3, 5000.0)]);
    let mut csafl = sim_cfg(Protocol::Csafl);
    csafl.delay_threshold = 2;
    csafl.budget_ms = 10_000;
    let mut nog = csafl.clone();
    nog.protocol = Protocol::NogFedAvg;

    let assignment = GroupAssignment::global(4).unwrap();
    let a = run_experiment(&ds, &provider, Some(&assignment), &csafl).unwrap();
    let b = run_experiment(&ds, &provider, None, &nog).unwrap();
    assert!(
        a.metrics[0].forced_syncs >= 1,
        "the slow client should force at least one synchronization"
    );
    assert_same_behavior(&a, &b);
}

#[test]
fn test_unselected_group_keeps_model() {
    let ds = tiny_dataset(4, 41);
    let assignment = GroupAssignment::from_labels(&[0, 0, 1, 1]).unwrap();
    let mut cfg = sim_cfg(Protocol::GaFedAvg);
    cfg.clients_per_round = 1;
    let provider = fixed(&[(0, 1000.0), (1, 1000.0), (2, 1000.0), (3, 1000.0)]);
    let trace = run_experiment(&ds, &provider, Some(&assignment), &cfg).unwrap();

    assert_eq!(trace.metrics.len(), 2);
    let active: Vec<&RoundGroupMetrics> =
        trace.metrics.iter().filter(|m| m.commits > 0).collect();
    let inactive: Vec<&RoundGroupMetrics> =
        trace.metrics.iter().filter(|m| m.commits == 0).collect();
    assert_eq!(active.len(), 1);
    assert_eq!(inactive.len(), 1);

    let g = inactive[0].group_id;
    let zeros = ModelParams::zeros(ds.num_classes, ds.feature_dim);
    assert_eq!(trace.final_models[g], zeros);
    // The idle group is still evaluated: its accuracy is whatever the
    // zero model scores on the pooled member test data.
    let pool: Vec<Sample> = trace
        .assignment
        .members(g)
        .iter()
        .flat_map(|&c| ds.shards[c].test.iter().cloned())
        .collect();
    let (acc, _) = evaluate(&zeros, &pool).unwrap();
    assert_eq!(inactive[0].accuracy, acc);
}

#[test]
fn test_mix_commit_blends_models() {
    let ds = tiny_dataset(1, 43);
    let mut cfg = sim_cfg(Protocol::TaFedAvg);
    cfg.commit_mode = CommitMode::Mix(0.25);
    cfg.budget_ms = 5000;
    let trace = run_experiment(&ds, &fixed(&[(0, 5000.0)]), None, &cfg).unwrap();

    assert_eq!(trace.events.len(), 1, "one commit exactly at the budget");
    let trained = client_update(
        &ModelParams::zeros(ds.num_classes, ds.feature_dim),
        &ds.shards[0].train,
        &cfg.training,
        training_seed(cfg.seed, 0, 0, 0),
    )
    .unwrap();
    // Mixing into the zero start model scales the update by the factor.
    let expected = ModelParams {
        weights: trained.weights.mapv(|w| 0.25 * w),
        bias: trained.bias.mapv(|b| 0.25 * b),
    };
    assert_eq!(trace.final_models[0], expected);
}

#[test]
fn test_pull_on_commit_trains_from_merged_model() {
    let ds = tiny_dataset(1, 47);
    let mut pulling = sim_cfg(Protocol::TaFedAvg);
    pulling.commit_mode = CommitMode::Mix(0.5);
    pulling.pull_on_commit = true;
    pulling.budget_ms = 8000;
    let mut keeping = pulling.clone();
    keeping.pull_on_commit = false;

    let provider = fixed(&[(0, 4000.0)]);
    let a = run_experiment(&ds, &provider, None, &pulling).unwrap();
    let b = run_experiment(&ds, &provider, None, &keeping).unwrap();
    assert_eq!(a.events.len(), 2);
    assert_eq!(b.events.len(), 2);
    assert_ne!(
        a.final_models[0], b.final_models[0],
        "training base differs after the first mix commit"
    );

    // By hand: first commit mixes into zeros, the pulled client then
    // trains from that merged model.
    let step = |m: &ModelParams, idx: u64| {
        client_update(
            m,
            &ds.shards[0].train,
            &pulling.training,
            training_seed(pulling.seed, 0, 0, idx),
        )
        .unwrap()
    };
    let w0 = ModelParams::zeros(ds.num_classes, ds.feature_dim);
    let t1 = step(&w0, 0);
    let g1 = ModelParams {
        weights: t1.weights.mapv(|w| 0.5 * w),
        bias: t1.bias.mapv(|b| 0.5 * b),
    };
    let t2 = step(&g1, 1);
    let g2 = ModelParams {
        weights: 0.5 * &t2.weights + 0.5 * &g1.weights,
        bias: 0.5 * &t2.bias + 0.5 * &g1.bias,
    };
    assert_eq!(a.final_models[0], g2);
}

fn model_provider(ds: &FederatedDataset, seed: u64) -> LatencyProvider {
    let sizes: Vec<usize> = ds.shards.iter().map(|s| s.train.len()).collect();
    let clients = generate_profiles(&sizes, &ProfileRanges::default(), seed).unwrap();
    LatencyProvider::Model {
        profiles: ProfileSet {
            system: RadioSystem {
                total_bandwidth_hz: 1e6,
                noise_dbm_per_hz: -174.0,
                model_size_bits: 64_000.0,
            },
            clients,
        },
        noise_bandwidth: NoiseBandwidth::default(),
    }
}

#[test]
fn test_runs_are_deterministic_with_model_latencies() {
    let ds = tiny_dataset(8, 53);
    let provider = model_provider(&ds, 99);
    let assignment = GroupAssignment::from_labels(&[0, 0, 0, 1, 1, 1, 0, 1]).unwrap();
    let mut cfg = sim_cfg(Protocol::Csafl);
    cfg.rounds = 2;
    cfg.clients_per_round = 6;
    cfg.budget_ms = 4000;

    let a = run_experiment(&ds, &provider, Some(&assignment), &cfg).unwrap();
    let b = run_experiment(&ds, &provider, Some(&assignment), &cfg).unwrap();
    assert_same_behavior(&a, &b);
    assert!(!a.events.is_empty());

    // Commit versions count up from one within each round and group.
    for round in 0..cfg.rounds {
        for group in 0..assignment.n_groups() {
            let mut expected = 0;
            let mut last_time = 0.0;
            for e in a
                .events
                .iter()
                .filter(|e| e.round == round && e.group_id == group)
            {
                assert!(e.time_ms >= last_time, "events must replay in order");
                last_time = e.time_ms;
                if e.kind != EventKind::Download {
                    expected += 1;
                    assert_eq!(e.group_version, expected);
                }
            }
        }
    }
}

#[test]
fn test_latency_redraw_modes() {
    let ds = tiny_dataset(1, 59);
    let profile = ClientProfile {
        client_id: 0,
        data_size: 50,
        x_ms_per_sample: 2.0,
        mu: 0.2,
        power_dbm: 23.0,
        bandwidth_share: 0.1,
        distance_km: 0.5,
    };
    let provider = LatencyProvider::Model {
        profiles: ProfileSet {
            system: RadioSystem {
                total_bandwidth_hz: 1e6,
                noise_dbm_per_hz: -174.0,
                model_size_bits: 1e5,
            },
            clients: vec![profile],
        },
        noise_bandwidth: NoiseBandwidth::default(),
    };
    let mut cfg = sim_cfg(Protocol::TaFedAvg);
    cfg.budget_ms = 4000;

    let gaps = |trace: &SimulationTrace| -> Vec<f64> {
        let times: Vec<f64> = trace.events.iter().map(|e| e.time_ms).collect();
        let mut gaps = vec![times[0]];
        gaps.extend(times.windows(2).map(|w| w[1] - w[0]));
        gaps
    };

    cfg.latency_redraw = LatencyRedraw::PerRound;
    let per_round = run_experiment(&ds, &provider, None, &cfg).unwrap();
    let g = gaps(&per_round);
    assert!(g.len() >= 5, "expected several commits, got {}", g.len());
    assert!(
        g.iter().all(|&x| (x - g[0]).abs() < 1e-6),
        "one draw per round means equal spacing, got {g:?}"
    );

    cfg.latency_redraw = LatencyRedraw::PerUpdate;
    let per_update = run_experiment(&ds, &provider, None, &cfg).unwrap();
    let g = gaps(&per_update);
    assert!(g.len() >= 5);
    assert!(
        g.iter().any(|&x| (x - g[0]).abs() > 1e-6),
        "fresh draws should vary the spacing, got {g:?}"
    );
}

#[test]
fn test_protocol_names_round_trip() {
    for p in Protocol::ALL {
        let parsed: Protocol = p.as_str().parse().unwrap();
        assert_eq!(parsed, p);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, format!("\"{}\"", p.as_str()));
    }
    assert!("fedavg".parse::<Protocol>().is_err());
}

#[test]
fn test_commit_mode_json_forms() {
    assert_eq!(
        serde_json::to_string(&CommitMode::Replace).unwrap(),
        "\"replace\""
    );
    assert_eq!(
        serde_json::to_string(&CommitMode::Mix(0.5)).unwrap(),
        "{\"mix\":0.5}"
    );
    let parsed: CommitMode = serde_json::from_str("{\"mix\":0.25}").unwrap();
    assert_eq!(parsed, CommitMode::Mix(0.25));
    assert!(CommitMode::Mix(0.0).validate().is_err());
    assert!(CommitMode::Mix(1.5).validate().is_err());
}

#[test]
fn test_missing_assignment_is_rejected() {
    let ds = tiny_dataset(2, 61);
    let cfg = sim_cfg(Protocol::Csafl);
    let err = run_experiment(&ds, &fixed(&[(0, 1000.0), (1, 1000.0)]), None, &cfg)
        .unwrap_err()
        .to_string();
    assert!(err.contains("requires a group assignment"), "got: {err}");

    let wrong_size = GroupAssignment::global(3).unwrap();
    let err = run_experiment(
        &ds,
        &fixed(&[(0, 1000.0), (1, 1000.0)]),
        Some(&wrong_size),
        &cfg,
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("covers 3 clients"), "got: {err}");
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

        #[test]
        fn staleness_gap_never_exceeds_threshold(
            lat in proptest::collection::vec(500u32..8000, 2..5),
            threshold in 0u64..4,
            budget in 4000u64..20_000,
        ) {
            let n = lat.len();
            let ds = tiny_dataset(n, 77);
            let latency_ms: BTreeMap<usize, f64> =
                lat.iter().enumerate().map(|(c, &l)| (c, l as f64)).collect();
            let provider = LatencyProvider::Fixed { latency_ms };
            let assignment = GroupAssignment::global(n).unwrap();
            let mut cfg = sim_cfg(Protocol::Csafl);
            cfg.delay_threshold = threshold;
            cfg.budget_ms = budget;

            let trace = run_experiment(&ds, &provider, Some(&assignment), &cfg).unwrap();
            for s in &trace.staleness {
                prop_assert!(
                    s.delta_v <= threshold,
                    "client {} started an update with version gap {} > {threshold}",
                    s.client_id,
                    s.delta_v
                );
            }

            let mut version = 0;
            let mut last_time = 0.0;
            for e in &trace.events {
                prop_assert!(e.time_ms >= last_time);
                last_time = e.time_ms;
                if e.kind != EventKind::Download {
                    version += 1;
                    prop_assert_eq!(e.group_version, version);
                }
            }
            prop_assert_eq!(trace.metrics[0].commits as u64, version);
        }
    }
}
