//! Metric aggregation and the flat CSV formats runs are persisted in.
//!
//! Two files describe a finished run:
//!
//! * `metrics.csv` — one row per round per group:
//!   `round,protocol,group_id,weighted_accuracy,mean_loss,commits,forced_syncs`
//! * `events.csv` — one row per commit or download:
//!   `time_ms,round,group_id,client_id,kind,group_version`
//!
//! Numbers are written with Rust's shortest round-tripping notation, so
//! reading a file back and rewriting it reproduces it byte for byte.
//! Everything in this module is a pure function of its inputs; aggregating
//! the same files twice gives identical results.

use std::collections::BTreeMap;
use std::path::Path;

use crate::sim::{CommitEvent, EventKind, IdleRecord, Protocol, RoundGroupMetrics, SimulationTrace};
use crate::{Error, Result};

pub const METRICS_HEADER: &str =
    "round,protocol,group_id,weighted_accuracy,mean_loss,commits,forced_syncs";
pub const EVENTS_HEADER: &str = "time_ms,round,group_id,client_id,kind,group_version";

/// One `metrics.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub protocol: Protocol,
    pub group_id: usize,
    pub weighted_accuracy: f64,
    pub mean_loss: f64,
    pub commits: usize,
    pub forced_syncs: usize,
}

impl MetricsRow {
    pub fn from_group_metrics(protocol: Protocol, m: &RoundGroupMetrics) -> Self {
        MetricsRow {
            round: m.round,
            protocol,
            group_id: m.group_id,
            weighted_accuracy: m.accuracy,
            mean_loss: m.mean_loss,
            commits: m.commits,
            forced_syncs: m.forced_syncs,
        }
    }
}

/// Test-sample-weighted accuracy across groups: each group contributes its
/// accuracy weighted by how many test samples it was evaluated on, which
/// equals total correct predictions over total test samples.
pub fn weighted_accuracy(groups: &[(f64, usize)]) -> Result<f64> {
    let total: usize = groups.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return Err(Error::degenerate(
            "weighted accuracy needs at least one test sample",
        ));
    }
    let correct: f64 = groups.iter().map(|&(acc, n)| acc * n as f64).sum();
    Ok(correct / total as f64)
}

/// Distribution of per-client, per-round idle totals.
///
/// `frequencies[i]` is the fraction of observations falling in
/// `[edges[i], edges[i + 1])`; the final edge is infinite so every
/// observation lands somewhere and the frequencies sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct IdleHistogram {
    pub edges: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub threshold_fraction: f64,
    /// Fraction of observations strictly above `threshold_fraction` of
    /// the round budget.
    pub exceed_fraction: f64,
    pub observations: usize,
}

/// Buckets of equal width spanning `[0, budget]`, plus one for anything
/// beyond the budget.
pub const IDLE_HISTOGRAM_BUCKETS: usize = 10;

/// Builds the histogram from raw idle totals, one value per client per
/// round.
pub fn histogram_from_observations(
    observations: &[f64],
    budget_ms: u64,
    threshold_fraction: f64,
) -> Result<IdleHistogram> {
    if observations.is_empty() {
        return Err(Error::degenerate("idle histogram needs observations"));
    }
    if budget_ms == 0 {
        return Err(Error::config("idle histogram needs a budget > 0"));
    }
    if !(threshold_fraction.is_finite() && threshold_fraction >= 0.0) {
        return Err(Error::config(format!(
            "idle threshold fraction must be finite and >= 0, got {threshold_fraction}"
        )));
    }

    let h = budget_ms as f64;
    let width = h / IDLE_HISTOGRAM_BUCKETS as f64;
    let mut edges: Vec<f64> = (0..=IDLE_HISTOGRAM_BUCKETS)
        .map(|i| i as f64 * width)
        .collect();
    edges.push(f64::INFINITY);

    let mut counts = [0usize; IDLE_HISTOGRAM_BUCKETS + 1];
    let mut exceeded = 0usize;
    let cutoff = threshold_fraction * h;
    for &idle in observations {
        let bucket = if idle >= h {
            IDLE_HISTOGRAM_BUCKETS
        } else {
            (idle / width) as usize
        };
        counts[bucket] += 1;
        if idle > cutoff {
            exceeded += 1;
        }
    }

    let n = observations.len() as f64;
    Ok(IdleHistogram {
        edges,
        frequencies: counts.iter().map(|&c| c as f64 / n).collect(),
        threshold_fraction,
        exceed_fraction: exceeded as f64 / n,
        observations: observations.len(),
    })
}

/// Histogram of a finished run's idle time. Every client that was active
/// in a round contributes one observation: the total time it spent waiting
/// at synchronization barriers that round, zero if it never waited.
pub fn idle_histogram(
    trace: &SimulationTrace,
    budget_ms: u64,
    threshold_fraction: f64,
) -> Result<IdleHistogram> {
    let totals = idle_totals(&trace.events, &trace.idle);
    let observations: Vec<f64> = totals.into_values().collect();
    histogram_from_observations(&observations, budget_ms, threshold_fraction)
}

/// Sums idle records into per-`(round, client)` totals. Clients that
/// appear in the event log but never waited contribute an explicit zero.
pub fn idle_totals(
    events: &[CommitEvent],
    idle: &[IdleRecord],
) -> BTreeMap<(usize, usize), f64> {
    let mut totals: BTreeMap<(usize, usize), f64> = events
        .iter()
        .map(|e| ((e.round, e.client_id), 0.0))
        .collect();
    for r in idle {
        *totals.entry((r.round, r.client_id)).or_insert(0.0) += r.idle_ms;
    }
    totals
}

/// Reconstructs the idle log from an event log: every barrier finish is
/// paired with that client's next download in the same round and group.
/// Records are sorted by round, then client, then waiting time.
pub fn idle_from_events(events: &[CommitEvent]) -> Vec<IdleRecord> {
    let mut finishes: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    let mut downloads: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for e in events {
        let key = (e.round, e.group_id, e.client_id);
        match e.kind {
            EventKind::SyncBarrier => finishes.entry(key).or_default().push(e.time_ms),
            EventKind::Download => downloads.entry(key).or_default().push(e.time_ms),
            EventKind::AsyncCommit => {}
        }
    }

    let empty = Vec::new();
    let mut records = Vec::new();
    for (key, finish_times) in &finishes {
        let download_times = downloads.get(key).unwrap_or(&empty);
        for (f, d) in finish_times.iter().zip(download_times) {
            records.push(IdleRecord {
                round: key.0,
                client_id: key.2,
                idle_ms: d - f,
            });
        }
    }
    records.sort_by(|a, b| {
        (a.round, a.client_id)
            .cmp(&(b.round, b.client_id))
            .then(a.idle_ms.total_cmp(&b.idle_ms))
    });
    records
}

/// Per-round accuracy across all groups of one run, weighted by each
/// group's test-sample count (taken from the run's group composition).
pub fn global_accuracy_per_round(
    rows: &[MetricsRow],
    test_samples_per_group: &BTreeMap<usize, usize>,
) -> Result<Vec<(usize, f64)>> {
    let mut by_round: BTreeMap<usize, Vec<(f64, usize)>> = BTreeMap::new();
    for row in rows {
        let &n = test_samples_per_group.get(&row.group_id).ok_or_else(|| {
            Error::config(format!(
                "no test-sample count for group {} (round {})",
                row.group_id, row.round
            ))
        })?;
        by_round
            .entry(row.round)
            .or_default()
            .push((row.weighted_accuracy, n));
    }
    by_round
        .into_iter()
        .map(|(round, groups)| Ok((round, weighted_accuracy(&groups)?)))
        .collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            m.round,
            m.protocol.as_str(),
            m.group_id,
            m.weighted_accuracy,
            m.mean_loss,
            m.commits,
            m.forced_syncs
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut lines = text.lines().enumerate();

    expect_header(&name, lines.next(), METRICS_HEADER)?;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields = split_fields(&name, lineno, line, 7)?;
        let row = MetricsRow {
            round: parse_field(&name, lineno, "round", fields[0])?,
            protocol: fields[1]
                .parse()
                .map_err(|e: Error| Error::parse(&name, lineno, e.to_string()))?,
            group_id: parse_field(&name, lineno, "group_id", fields[2])?,
            weighted_accuracy: parse_field(&name, lineno, "weighted_accuracy", fields[3])?,
            mean_loss: parse_field(&name, lineno, "mean_loss", fields[4])?,
            commits: parse_field(&name, lineno, "commits", fields[5])?,
            forced_syncs: parse_field(&name, lineno, "forced_syncs", fields[6])?,
        };
        if !(row.weighted_accuracy >= 0.0 && row.weighted_accuracy <= 1.0) {
            return Err(Error::parse(
                &name,
                lineno,
                format!(
                    "weighted_accuracy must lie in [0, 1], got {}",
                    row.weighted_accuracy
                ),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_events_csv(path: &Path, events: &[CommitEvent]) -> Result<()> {
    let mut out = String::from(EVENTS_HEADER);
    out.push('\n');
    for e in events {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.time_ms,
            e.round,
            e.group_id,
            e.client_id,
            e.kind.as_str(),
            e.group_version
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_events_csv(path: &Path) -> Result<Vec<CommitEvent>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut events = Vec::new();
    let mut lines = text.lines().enumerate();

    expect_header(&name, lines.next(), EVENTS_HEADER)?;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let fields = split_fields(&name, lineno, line, 6)?;
        events.push(CommitEvent {
            time_ms: parse_field(&name, lineno, "time_ms", fields[0])?,
            round: parse_field(&name, lineno, "round", fields[1])?,
            group_id: parse_field(&name, lineno, "group_id", fields[2])?,
            client_id: parse_field(&name, lineno, "client_id", fields[3])?,
            kind: fields[4]
                .parse()
                .map_err(|e: Error| Error::parse(&name, lineno, e.to_string()))?,
            group_version: parse_field(&name, lineno, "group_version", fields[5])?,
        });
    }
    Ok(events)
}

fn expect_header(name: &str, first: Option<(usize, &str)>, expected: &str) -> Result<()> {
    match first {
        Some((_, line)) if line == expected => Ok(()),
        Some((_, other)) => Err(Error::parse(
            name,
            1,
            format!("expected header '{expected}', got '{other}'"),
        )),
        None => Err(Error::parse(name, 0, "empty file")),
    }
}

fn split_fields<'a>(name: &str, lineno: usize, line: &'a str, want: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != want {
        return Err(Error::parse(
            name,
            lineno,
            format!("expected {want} fields, got {}", fields.len()),
        ));
    }
    Ok(fields)
}

fn parse_field<T: std::str::FromStr>(
    name: &str,
    lineno: usize,
    column: &str,
    raw: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse().map_err(|e: T::Err| {
        Error::parse(name, lineno, format!("bad {column} value '{raw}': {e}"))
    })
}
