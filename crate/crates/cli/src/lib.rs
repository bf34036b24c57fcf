//! Command-line front end: dataset and profile generation, client
//! grouping, simulation runs, and cross-run report aggregation.
//!
//! Every command is deterministic in its inputs: running the same
//! invocation twice produces byte-identical output files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use csafl_core::cluster::{
    cluster_clients, load_assignment, save_assignment, AffinityExponent, ClusterConfig,
    GroupAssignment,
};
use csafl_core::data::{
    generate_synthetic, load_dataset, partition_by_power_law, save_dataset, FederatedDataset,
    PowerLaw, Sample, SyntheticConfig,
};
use csafl_core::latency::{
    expected_total_latency_ms, generate_profiles, load_profiles, save_profiles, NoiseBandwidth,
    Normalization, ProfileRanges, ProfileSet, RadioSystem,
};
use csafl_core::model::TrainingConfig;
use csafl_core::report::{
    global_accuracy_per_round, histogram_from_observations, idle_from_events, idle_totals,
    read_events_csv, read_metrics_csv, write_events_csv, write_metrics_csv, MetricsRow,
};
use csafl_core::sim::{
    run_experiment, CommitMode, LatencyProvider, LatencyRedraw, Protocol, RFedAvgUpdate,
    SimConfig, SimulationTrace,
};

#[derive(Parser)]
#[command(
    name = "csafl",
    version,
    about = "Deterministic simulator for clustered semi-asynchronous federated learning"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate or partition a federated dataset
    GenData(GenDataArgs),
    /// Synthesize per-client latency profiles for a dataset
    GenProfiles(GenProfilesArgs),
    /// Group clients by update direction and latency similarity
    Cluster(ClusterArgs),
    /// Execute one simulation run described by a JSON config file
    Run(RunArgs),
    /// Aggregate finished run directories into comparison tables
    Report(ReportArgs),
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::GenProfiles(args) => cmd_gen_profiles(&args),
        Command::Cluster(args) => cmd_cluster(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Report(args) => cmd_report(&args),
    }
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Args)]
pub struct GenDataArgs {
    #[command(subcommand)]
    pub source: GenDataSource,
}

#[derive(Subcommand)]
pub enum GenDataSource {
    /// Draw a synthetic non-IID classification dataset
    Synthetic(SyntheticArgs),
    /// Partition a labeled sample pool (a JSON array of samples)
    Partition(PartitionArgs),
}

#[derive(Args)]
pub struct SyntheticArgs {
    /// Output dataset file
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clients: usize,
    /// Spread of per-client ground-truth models (non-IID-ness of concepts)
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Spread of per-client feature means (non-IID-ness of inputs)
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 60)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Guaranteed minimum samples per client
    #[arg(long, default_value_t = 10)]
    pub min_samples: usize,
    /// Power-law exponent of the shard-size distribution
    #[arg(long, default_value_t = 1.2)]
    pub exponent: f64,
    /// Total samples across all clients
    #[arg(long)]
    pub total_samples: usize,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PartitionArgs {
    /// JSON file holding the sample pool to split
    #[arg(long)]
    pub pool: PathBuf,
    /// Output dataset file
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clients: usize,
    /// Distinct classes each client may hold
    #[arg(long, default_value_t = 2)]
    pub classes_per_client: usize,
    /// Guaranteed minimum samples per client
    #[arg(long, default_value_t = 10)]
    pub min_samples: usize,
    /// Power-law exponent of the shard-size distribution
    #[arg(long, default_value_t = 1.2)]
    pub exponent: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long)]
    pub seed: u64,
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let (dataset, note) = match &args.source {
        GenDataSource::Synthetic(a) => {
            let ds = generate_synthetic(&SyntheticConfig {
                alpha: a.alpha,
                beta: a.beta,
                num_clients: a.clients,
                feature_dim: a.feature_dim,
                num_classes: a.classes,
                samples: PowerLaw {
                    min_per_client: a.min_samples,
                    exponent: a.exponent,
                    total_samples: a.total_samples,
                },
                test_fraction: a.test_fraction,
                seed: a.seed,
            })?;
            (ds, String::new())
        }
        GenDataSource::Partition(a) => {
            let text = std::fs::read_to_string(&a.pool)
                .with_context(|| format!("reading pool file {}", a.pool.display()))?;
            let pool: Vec<Sample> = serde_json::from_str(&text)
                .with_context(|| format!("parsing pool file {}", a.pool.display()))?;
            let outcome = partition_by_power_law(
                &pool,
                a.clients,
                a.classes_per_client,
                a.min_samples,
                a.exponent,
                a.test_fraction,
                a.seed,
            )?;
            let note = if outcome.dropped_samples > 0 {
                format!(" ({} pool samples dropped)", outcome.dropped_samples)
            } else {
                String::new()
            };
            (outcome.dataset, note)
        }
    };

    let out = match &args.source {
        GenDataSource::Synthetic(a) => &a.out,
        GenDataSource::Partition(a) => &a.out,
    };
    save_dataset(&dataset, out)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    let train: usize = dataset.shards.iter().map(|s| s.train.len()).sum();
    let test: usize = dataset.shards.iter().map(|s| s.test.len()).sum();
    println!(
        "wrote {}: {} clients, {} train / {} test samples{}",
        out.display(),
        dataset.shards.len(),
        train,
        test,
        note
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-profiles

/// An inclusive numeric range given as `low,high`.
#[derive(Debug, Clone, Copy)]
pub struct RangePair(pub f64, pub f64);

fn parse_range(s: &str) -> std::result::Result<RangePair, String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected 'low,high', got '{s}'"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad low value: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad high value: {e}"))?;
    Ok(RangePair(lo, hi))
}

#[derive(Args)]
pub struct GenProfilesArgs {
    /// Dataset whose shard sizes drive computation latency
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output profiles file
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Total system bandwidth in Hz
    #[arg(long, default_value_t = 1e6)]
    pub bandwidth_hz: f64,
    /// Noise power spectral density in dBm/Hz
    #[arg(long, default_value_t = -174.0, allow_hyphen_values = true)]
    pub noise_dbm_per_hz: f64,
    /// Upload size in bits; defaults to 64 bits per model parameter
    #[arg(long)]
    pub model_size_bits: Option<f64>,
    /// Per-sample processing time range, ms (`low,high`)
    #[arg(long, value_parser = parse_range)]
    pub x_range: Option<RangePair>,
    /// Computation overshoot rate range (`low,high`)
    #[arg(long, value_parser = parse_range)]
    pub mu_range: Option<RangePair>,
    /// Transmit power range, dBm (`low,high`)
    #[arg(long, value_parser = parse_range)]
    pub power_range: Option<RangePair>,
    /// Bandwidth share range (`low,high`)
    #[arg(long, value_parser = parse_range)]
    pub share_range: Option<RangePair>,
    /// Client distance range, km (`low,high`)
    #[arg(long, value_parser = parse_range)]
    pub distance_range: Option<RangePair>,
}

fn cmd_gen_profiles(args: &GenProfilesArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let sizes: Vec<usize> = dataset.shards.iter().map(|s| s.train.len()).collect();

    let mut ranges = ProfileRanges::default();
    if let Some(RangePair(lo, hi)) = args.x_range {
        ranges.x_ms_per_sample = (lo, hi);
    }
    if let Some(RangePair(lo, hi)) = args.mu_range {
        ranges.mu = (lo, hi);
    }
    if let Some(RangePair(lo, hi)) = args.power_range {
        ranges.power_dbm = (lo, hi);
    }
    if let Some(RangePair(lo, hi)) = args.share_range {
        ranges.bandwidth_share = (lo, hi);
    }
    if let Some(RangePair(lo, hi)) = args.distance_range {
        ranges.distance_km = (lo, hi);
    }

    let parameters = dataset.num_classes * dataset.feature_dim + dataset.num_classes;
    let set = ProfileSet {
        system: RadioSystem {
            total_bandwidth_hz: args.bandwidth_hz,
            noise_dbm_per_hz: args.noise_dbm_per_hz,
            model_size_bits: args
                .model_size_bits
                .unwrap_or(64.0 * parameters as f64),
        },
        clients: generate_profiles(&sizes, &ranges, args.seed)?,
    };
    save_profiles(&set, &args.out)
        .with_context(|| format!("writing profiles to {}", args.out.display()))?;

    let expected: Vec<f64> = set
        .clients
        .iter()
        .map(|p| expected_total_latency_ms(p, &set.system, NoiseBandwidth::default()))
        .collect();
    let min = expected.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = expected.iter().cloned().fold(0.0, f64::max);
    println!(
        "wrote {}: {} profiles, expected update latency {:.1}..{:.1} ms ({:.1}x spread)",
        args.out.display(),
        set.clients.len(),
        min,
        max,
        max / min
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// cluster

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormalizationArg {
    Variance,
    Stddev,
    Log,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AffinityExponentArg {
    Norm,
    NormSquared,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseBandwidthArg {
    Allocated,
    Total,
}

impl From<NormalizationArg> for Normalization {
    fn from(v: NormalizationArg) -> Self {
        match v {
            NormalizationArg::Variance => Normalization::Variance,
            NormalizationArg::Stddev => Normalization::StdDev,
            NormalizationArg::Log => Normalization::Log,
        }
    }
}

impl From<AffinityExponentArg> for AffinityExponent {
    fn from(v: AffinityExponentArg) -> Self {
        match v {
            AffinityExponentArg::Norm => AffinityExponent::Norm,
            AffinityExponentArg::NormSquared => AffinityExponent::NormSquared,
        }
    }
}

impl From<NoiseBandwidthArg> for NoiseBandwidth {
    fn from(v: NoiseBandwidthArg) -> Self {
        match v {
            NoiseBandwidthArg::Allocated => NoiseBandwidth::Allocated,
            NoiseBandwidthArg::Total => NoiseBandwidth::Total,
        }
    }
}

#[derive(Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub profiles: PathBuf,
    /// Output assignment file (client_id,group_id CSV)
    #[arg(long)]
    pub out: PathBuf,
    /// Number of groups to form
    #[arg(long)]
    pub groups: usize,
    /// Weight of the latency feature against the update-direction features
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Gaussian affinity kernel width
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.03)]
    pub pretrain_lr: f64,
    #[arg(long, default_value_t = 10)]
    pub pretrain_batch: usize,
    #[arg(long, default_value_t = 1)]
    pub pretrain_epochs: usize,
    /// How expected latencies are rescaled before entering the features
    #[arg(long, value_enum, default_value_t = NormalizationArg::Variance)]
    pub normalization: NormalizationArg,
    /// Distance exponent inside the Gaussian kernel
    #[arg(long, value_enum, default_value_t = AffinityExponentArg::Norm)]
    pub affinity_exponent: AffinityExponentArg,
    /// Bandwidth over which noise power is integrated
    #[arg(long, value_enum, default_value_t = NoiseBandwidthArg::Allocated)]
    pub noise_bandwidth: NoiseBandwidthArg,
    /// Where the JSON cluster report goes (default: next to the assignment)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write the affinity matrix as a headerless CSV
    #[arg(long)]
    pub dump_affinity: Option<PathBuf>,
}

#[derive(Serialize)]
struct ClusterReport {
    n_groups: usize,
    group_sizes: Vec<usize>,
    groups: Vec<ClusterReportGroup>,
    /// Indexed by client id.
    expected_latency_ms: Vec<f64>,
}

#[derive(Serialize)]
struct ClusterReportGroup {
    group_id: usize,
    members: Vec<usize>,
    mean_expected_latency_ms: f64,
}

fn cmd_cluster(args: &ClusterArgs) -> Result<()> {
    let dataset = load_dataset(&args.dataset)
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let profiles = load_profiles(&args.profiles)
        .with_context(|| format!("loading profiles {}", args.profiles.display()))?;

    let outcome = cluster_clients(
        &dataset,
        &profiles,
        &ClusterConfig {
            beta: args.beta,
            sigma: args.sigma,
            n_groups: args.groups,
            pretrain: TrainingConfig {
                learning_rate: args.pretrain_lr,
                batch_size: args.pretrain_batch,
                local_epochs: args.pretrain_epochs,
            },
            seed: args.seed,
            normalization: args.normalization.into(),
            affinity_exponent: args.affinity_exponent.into(),
            noise_bandwidth: args.noise_bandwidth.into(),
        },
    )?;

    save_assignment(&outcome.assignment, &args.out)
        .with_context(|| format!("writing assignment to {}", args.out.display()))?;

    let groups: Vec<ClusterReportGroup> = (0..outcome.assignment.n_groups())
        .map(|g| {
            let members = outcome.assignment.members(g);
            let mean = members
                .iter()
                .map(|&c| outcome.expected_latency_ms[c])
                .sum::<f64>()
                / members.len() as f64;
            ClusterReportGroup {
                group_id: g,
                members,
                mean_expected_latency_ms: mean,
            }
        })
        .collect();
    let report = ClusterReport {
        n_groups: outcome.assignment.n_groups(),
        group_sizes: groups.iter().map(|g| g.members.len()).collect(),
        groups,
        expected_latency_ms: outcome.expected_latency_ms.clone(),
    };
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_file_name("cluster-report.json"));
    let mut json = serde_json::to_string_pretty(&report).context("serializing cluster report")?;
    json.push('\n');
    std::fs::write(&report_path, json)
        .with_context(|| format!("writing cluster report to {}", report_path.display()))?;

    if let Some(path) = &args.dump_affinity {
        let mut out = String::new();
        for row in outcome.affinity.rows() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        std::fs::write(path, out)
            .with_context(|| format!("writing affinity matrix to {}", path.display()))?;
    }

    println!(
        "wrote {}: {} clients in {} groups (sizes: {})",
        args.out.display(),
        outcome.assignment.num_clients(),
        report.n_groups,
        report
            .group_sizes
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// run

#[derive(Args)]
pub struct RunArgs {
    /// JSON run configuration
    #[arg(long)]
    pub config: PathBuf,
}

fn default_delay_threshold() -> u64 {
    4
}

fn default_n_groups() -> usize {
    1
}

/// Everything one simulation run needs, in one JSON document. Unknown
/// keys are rejected so typos cannot silently fall back to defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub profiles: PathBuf,
    /// Group assignment file; required by clustered protocols.
    #[serde(default)]
    pub assignment: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub protocol: Protocol,
    pub rounds: usize,
    pub budget_ms: u64,
    /// Version gap above which a commit forces a group synchronization.
    #[serde(default = "default_delay_threshold")]
    pub delay_threshold: u64,
    pub clients_per_round: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub commit_mode: CommitMode,
    #[serde(default)]
    pub pull_on_commit: bool,
    #[serde(default)]
    pub latency_redraw: LatencyRedraw,
    #[serde(default)]
    pub noise_bandwidth: NoiseBandwidth,
    /// Group count for randomly grouped runs.
    #[serde(default = "default_n_groups")]
    pub n_groups: usize,
    /// Update discipline for randomly grouped runs.
    #[serde(default)]
    pub r_fedavg_update: RFedAvgUpdate,
}

impl RunConfig {
    pub fn to_sim_config(&self) -> SimConfig {
        SimConfig {
            protocol: self.protocol,
            rounds: self.rounds,
            budget_ms: self.budget_ms,
            delay_threshold: self.delay_threshold,
            clients_per_round: self.clients_per_round,
            training: TrainingConfig {
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                local_epochs: self.local_epochs,
            },
            seed: self.seed,
            commit_mode: self.commit_mode,
            pull_on_commit: self.pull_on_commit,
            latency_redraw: self.latency_redraw,
            n_groups: self.n_groups,
            r_fedavg_update: self.r_fedavg_update,
        }
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading run config {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing run config {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunMetadata {
    /// Simulator version that produced the run.
    pub version: String,
    /// The full configuration with all defaults resolved.
    pub config: RunConfig,
    pub groups: Vec<GroupComposition>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupComposition {
    pub group_id: usize,
    pub members: Vec<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
}

fn group_compositions(
    dataset: &FederatedDataset,
    assignment: &GroupAssignment,
) -> Vec<GroupComposition> {
    let shard_of: BTreeMap<usize, &csafl_core::data::ClientShard> =
        dataset.shards.iter().map(|s| (s.client_id, s)).collect();
    (0..assignment.n_groups())
        .map(|g| {
            let members = assignment.members(g);
            let train = members.iter().map(|c| shard_of[c].train.len()).sum();
            let test = members.iter().map(|c| shard_of[c].test.len()).sum();
            GroupComposition {
                group_id: g,
                members,
                train_samples: train,
                test_samples: test,
            }
        })
        .collect()
}

/// Runs one experiment and writes `metrics.csv`, `events.csv` and
/// `run-metadata.json` into the configured output directory.
pub fn execute_run(config: &RunConfig) -> Result<SimulationTrace> {
    let dataset = load_dataset(&config.dataset)
        .with_context(|| format!("loading dataset {}", config.dataset.display()))?;
    let profiles = load_profiles(&config.profiles)
        .with_context(|| format!("loading profiles {}", config.profiles.display()))?;
    let assignment = match &config.assignment {
        Some(path) => Some(
            load_assignment(path)
                .with_context(|| format!("loading assignment {}", path.display()))?,
        ),
        None => {
            if config.protocol.needs_assignment() {
                bail!(
                    "protocol {} requires the `assignment` key in the run config",
                    config.protocol
                );
            }
            None
        }
    };

    let provider = LatencyProvider::Model {
        profiles,
        noise_bandwidth: config.noise_bandwidth,
    };
    let trace = run_experiment(
        &dataset,
        &provider,
        assignment.as_ref(),
        &config.to_sim_config(),
    )?;

    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating output dir {}", config.output_dir.display()))?;
    let rows: Vec<MetricsRow> = trace
        .metrics
        .iter()
        .map(|m| MetricsRow::from_group_metrics(trace.protocol, m))
        .collect();
    write_metrics_csv(&config.output_dir.join("metrics.csv"), &rows)?;
    write_events_csv(&config.output_dir.join("events.csv"), &trace.events)?;

    let metadata = RunMetadata {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        groups: group_compositions(&dataset, &trace.assignment),
    };
    let mut json =
        serde_json::to_string_pretty(&metadata).context("serializing run metadata")?;
    json.push('\n');
    std::fs::write(config.output_dir.join("run-metadata.json"), json)
        .with_context(|| format!("writing metadata in {}", config.output_dir.display()))?;
    Ok(trace)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let config = load_run_config(&args.config)?;
    let trace = execute_run(&config)?;
    let last = *trace.global_accuracy.last().unwrap_or(&0.0);
    println!(
        "wrote {}: {} rounds, {} groups, {} events, final weighted accuracy {:.4}",
        config.output_dir.display(),
        config.rounds,
        trace.assignment.n_groups(),
        trace.events.len(),
        last
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Args)]
pub struct ReportArgs {
    /// Directory the aggregated tables are written to
    #[arg(long)]
    pub out: PathBuf,
    /// Idle observations above this fraction of the budget count as
    /// excessive waiting
    #[arg(long, default_value_t = 0.6)]
    pub idle_threshold: f64,
    /// Finished run directories (each holding metrics.csv, events.csv and
    /// run-metadata.json)
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
}

struct RunSummary {
    label: String,
    protocol: Protocol,
    rounds: usize,
    final_accuracy: f64,
    mean_last10_accuracy: f64,
    total_commits: usize,
    total_forced_syncs: usize,
    exceed_fraction: f64,
}

fn run_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut summaries = Vec::new();
    let mut accuracy_rows = String::from("round,protocol,run,weighted_accuracy\n");
    let mut histogram_rows = String::from("run,protocol,bucket_low_ms,bucket_high_ms,frequency\n");

    for dir in &args.runs {
        let label = run_label(dir);
        let metadata_path = dir.join("run-metadata.json");
        let text = std::fs::read_to_string(&metadata_path)
            .with_context(|| format!("reading {}", metadata_path.display()))?;
        let metadata: RunMetadata = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", metadata_path.display()))?;

        let rows = read_metrics_csv(&dir.join("metrics.csv"))?;
        let events = read_events_csv(&dir.join("events.csv"))?;
        if rows.is_empty() {
            bail!("{}: metrics.csv has no rounds", dir.display());
        }
        let protocol = metadata.config.protocol;

        let weights: BTreeMap<usize, usize> = metadata
            .groups
            .iter()
            .map(|g| (g.group_id, g.test_samples))
            .collect();
        let per_round = global_accuracy_per_round(&rows, &weights)
            .with_context(|| format!("aggregating {}", dir.display()))?;
        for &(round, acc) in &per_round {
            let _ = writeln!(accuracy_rows, "{round},{},{label},{acc}", protocol.as_str());
        }

        let idle = idle_totals(&events, &idle_from_events(&events));
        let observations: Vec<f64> = idle.into_values().collect();
        let histogram = histogram_from_observations(
            &observations,
            metadata.config.budget_ms,
            args.idle_threshold,
        )
        .with_context(|| format!("building idle histogram for {}", dir.display()))?;
        for (i, &f) in histogram.frequencies.iter().enumerate() {
            let _ = writeln!(
                histogram_rows,
                "{label},{},{},{},{f}",
                protocol.as_str(),
                histogram.edges[i],
                histogram.edges[i + 1]
            );
        }

        let accs: Vec<f64> = per_round.iter().map(|&(_, a)| a).collect();
        let tail = &accs[accs.len().saturating_sub(10)..];
        summaries.push(RunSummary {
            label,
            protocol,
            rounds: per_round.len(),
            final_accuracy: *accs.last().unwrap(),
            mean_last10_accuracy: tail.iter().sum::<f64>() / tail.len() as f64,
            total_commits: rows.iter().map(|r| r.commits).sum(),
            total_forced_syncs: rows.iter().map(|r| r.forced_syncs).sum(),
            exceed_fraction: histogram.exceed_fraction,
        });
    }

    let mut summary_rows = String::from(
        "run,protocol,rounds,final_accuracy,mean_last10_accuracy,total_commits,total_forced_syncs,idle_exceed_fraction\n",
    );
    for s in &summaries {
        let _ = writeln!(
            summary_rows,
            "{},{},{},{},{},{},{},{}",
            s.label,
            s.protocol.as_str(),
            s.rounds,
            s.final_accuracy,
            s.mean_last10_accuracy,
            s.total_commits,
            s.total_forced_syncs,
            s.exceed_fraction
        );
    }

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating report dir {}", args.out.display()))?;
    std::fs::write(args.out.join("summary.csv"), &summary_rows)?;
    std::fs::write(args.out.join("accuracy_vs_round.csv"), &accuracy_rows)?;
    std::fs::write(args.out.join("idle_histogram.csv"), &histogram_rows)?;

    println!(
        "{:<24} {:<12} {:>7} {:>10} {:>10} {:>9} {:>7} {:>8}",
        "run", "protocol", "rounds", "final_acc", "last10_acc", "commits", "syncs", "idle>thr"
    );
    for s in &summaries {
        println!(
            "{:<24} {:<12} {:>7} {:>10.4} {:>10.4} {:>9} {:>7} {:>8.4}",
            s.label,
            s.protocol.as_str(),
            s.rounds,
            s.final_accuracy,
            s.mean_last10_accuracy,
            s.total_commits,
            s.total_forced_syncs,
            s.exceed_fraction
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
