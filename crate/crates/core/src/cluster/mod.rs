//! Client grouping by latency and update direction.
//!
//! Clients that train on similar data and finish in similar time should
//! share an aggregation group. Each client `i` gets a feature row
//!
//! ```text
//! L_i = [ beta * t_i ,  cos(delta_i, delta_0) , ... , cos(delta_i, delta_{v-1}) ]
//! ```
//!
//! where `t_i` is its normalized expected round latency and `delta_i` the
//! flattened model delta from one local training pass on the shared start
//! model. Rows are compared with a Gaussian kernel
//! `A_ij = exp(-||L_i - L_j|| / (2 sigma^2))`, and the groups are read off
//! a normalized spectral embedding: the eigenvectors of
//! `L_sym = I - D^{-1/2} A D^{-1/2}` for the `n` smallest eigenvalues,
//! rows rescaled to unit length, clustered with seeded k-means.

pub mod eigen;
mod kmeans;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::FederatedDataset;
use crate::latency::{
    expected_total_latency_ms, normalize_latencies, NoiseBandwidth, Normalization, ProfileSet,
};
use crate::model::{client_update, flatten_delta, FlatDelta, ModelParams, TrainingConfig};
use crate::rng::{derived_seed, stream, StreamKind};
use crate::{Error, Result};

pub use eigen::{jacobi_eigen, Eigen, JACOBI_MAX_SWEEPS, JACOBI_TOLERANCE};
pub use kmeans::{kmeans, KMeansResult, KMEANS_MAX_RESTARTS};

/// Which power of the row distance feeds the Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AffinityExponent {
    /// `exp(-||L_i - L_j|| / (2 sigma^2))`, the plain norm (default).
    #[default]
    Norm,
    /// `exp(-||L_i - L_j||^2 / (2 sigma^2))`, the conventional squared form.
    NormSquared,
}

/// Knobs for the grouping pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Weight of the latency column relative to the cosine columns.
    pub beta: f64,
    /// Gaussian kernel width.
    pub sigma: f64,
    /// Number of groups to form.
    pub n_groups: usize,
    /// Local training pass used to probe each client's update direction.
    pub pretrain: TrainingConfig,
    pub seed: u64,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub affinity_exponent: AffinityExponent,
    #[serde(default)]
    pub noise_bandwidth: NoiseBandwidth,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("cluster beta must be finite and >= 0"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("cluster sigma must be finite and > 0"));
        }
        if self.n_groups == 0 {
            return Err(Error::config("n_groups must be >= 1"));
        }
        self.pretrain.validate()
    }
}

/// A partition of clients into aggregation groups.
///
/// Group ids are contiguous from zero and every group has at least one
/// member; client ids are whatever the dataset uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    n_groups: usize,
    group_of: BTreeMap<usize, usize>,
}

impl GroupAssignment {
    pub fn from_map(group_of: BTreeMap<usize, usize>) -> Result<Self> {
        if group_of.is_empty() {
            return Err(Error::config("assignment has no clients"));
        }
        let n_groups = group_of.values().max().unwrap() + 1;
        let mut seen = vec![false; n_groups];
        for &g in group_of.values() {
            seen[g] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!(
                "group ids must be contiguous from 0: group {missing} has no members"
            )));
        }
        Ok(GroupAssignment { n_groups, group_of })
    }

    /// Everyone in one group; the degenerate grouping used by global
    /// protocols.
    pub fn global(num_clients: usize) -> Result<Self> {
        if num_clients == 0 {
            return Err(Error::config("assignment has no clients"));
        }
        Ok(GroupAssignment {
            n_groups: 1,
            group_of: (0..num_clients).map(|c| (c, 0)).collect(),
        })
    }

    /// Random near-equal-size groups: shuffle the ids, deal them round
    /// robin. Sizes differ by at most one.
    pub fn random(num_clients: usize, n_groups: usize, seed: u64) -> Result<Self> {
        if n_groups == 0 {
            return Err(Error::config("n_groups must be >= 1"));
        }
        if num_clients < n_groups {
            return Err(Error::config(format!(
                "cannot split {num_clients} clients into {n_groups} groups"
            )));
        }
        let mut ids: Vec<usize> = (0..num_clients).collect();
        let mut rng = stream(seed, StreamKind::RandomGrouping, &[]);
        ids.shuffle(&mut rng);
        let group_of = ids
            .into_iter()
            .enumerate()
            .map(|(pos, id)| (id, pos % n_groups))
            .collect();
        Ok(GroupAssignment { n_groups, group_of })
    }

    /// Builds from per-client labels indexed by client id.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        Self::from_map(labels.iter().enumerate().map(|(c, &g)| (c, g)).collect())
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn num_clients(&self) -> usize {
        self.group_of.len()
    }

    pub fn group_of(&self, client_id: usize) -> Option<usize> {
        self.group_of.get(&client_id).copied()
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        self.group_of
            .iter()
            .filter(|(_, &g)| g == group)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn clients(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.group_of.iter().map(|(&c, &g)| (c, g))
    }
}

pub fn save_assignment(assignment: &GroupAssignment, path: &Path) -> Result<()> {
    let mut out = String::from("client_id,group_id\n");
    for (client, group) in assignment.clients() {
        out.push_str(&format!("{client},{group}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_assignment(path: &Path) -> Result<GroupAssignment> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    match lines.next() {
        Some((_, "client_id,group_id")) => {}
        Some((_, other)) => {
            return Err(Error::parse(
                &name,
                1,
                format!("expected header 'client_id,group_id', got '{other}'"),
            ))
        }
        None => return Err(Error::parse(&name, 1, "empty file")),
    }

    let mut group_of = BTreeMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let (client, group) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(&name, lineno, "expected 'client_id,group_id'"))?;
        let client: usize = client
            .parse()
            .map_err(|_| Error::parse(&name, lineno, format!("bad client id '{client}'")))?;
        let group: usize = group
            .parse()
            .map_err(|_| Error::parse(&name, lineno, format!("bad group id '{group}'")))?;
        if group_of.insert(client, group).is_some() {
            return Err(Error::parse(
                &name,
                lineno,
                format!("client {client} assigned twice"),
            ));
        }
    }
    GroupAssignment::from_map(group_of)
}

/// Cosine of the angle between two vectors. Two zero vectors count as
/// identical (1); a zero vector against a non-zero one counts as
/// unrelated (0).
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config(format!(
            "cosine_similarity length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return Ok(1.0);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// One local training pass per client from the shared zero model; the
/// flattened deltas are the direction features for grouping.
pub fn pretrain_deltas(
    dataset: &FederatedDataset,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<Vec<FlatDelta>> {
    let start = ModelParams::zeros(dataset.num_classes, dataset.feature_dim);
    let mut deltas = Vec::with_capacity(dataset.num_clients());
    for shard in &dataset.shards {
        let trained = client_update(
            &start,
            &shard.train,
            cfg,
            derived_seed(seed, StreamKind::Pretrain, &[shard.client_id as u64]),
        )?;
        deltas.push(flatten_delta(&trained, &start)?);
    }
    Ok(deltas)
}

/// Per-client feature rows, `v x (v + 1)`: the weighted normalized latency
/// followed by the cosine against every client's delta.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub rows: Array2<f64>,
}

pub fn build_similarity_matrix(
    latencies_ms: &[f64],
    deltas: &[FlatDelta],
    beta: f64,
    normalization: Normalization,
) -> Result<SimilarityMatrix> {
    let v = latencies_ms.len();
    if v != deltas.len() {
        return Err(Error::config(format!(
            "similarity needs one latency per delta: {v} vs {}",
            deltas.len()
        )));
    }
    if v < 2 {
        return Err(Error::config("similarity needs at least two clients"));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::config("similarity beta must be finite and >= 0"));
    }

    let normalized = match normalize_latencies(latencies_ms, normalization) {
        Ok(t) => t,
        Err(Error::Degenerate(why)) => {
            log::warn!("latency column dropped from similarity features: {why}");
            vec![0.0; v]
        }
        Err(e) => return Err(e),
    };

    let mut rows = Array2::<f64>::zeros((v, v + 1));
    for i in 0..v {
        rows[[i, 0]] = beta * normalized[i];
        for j in 0..v {
            rows[[i, j + 1]] = cosine_similarity(&deltas[i].values, &deltas[j].values)?;
        }
    }
    Ok(SimilarityMatrix { rows })
}

/// Gaussian kernel over the feature rows. Symmetric, unit diagonal,
/// entries in `(0, 1]`.
pub fn gaussian_affinity(
    sim: &SimilarityMatrix,
    sigma: f64,
    exponent: AffinityExponent,
) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config("affinity sigma must be finite and > 0"));
    }
    let v = sim.rows.nrows();
    if sim.rows.ncols() != v + 1 {
        return Err(Error::config(format!(
            "similarity rows must be v x (v + 1), got {v} x {}",
            sim.rows.ncols()
        )));
    }

    let mut affinity = Array2::<f64>::zeros((v, v));
    for i in 0..v {
        affinity[[i, i]] = 1.0;
        for j in (i + 1)..v {
            let dist = sim
                .rows
                .row(i)
                .iter()
                .zip(sim.rows.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let arg = match exponent {
                AffinityExponent::Norm => dist,
                AffinityExponent::NormSquared => dist * dist,
            };
            let a = (-arg / (2.0 * sigma * sigma)).exp();
            affinity[[i, j]] = a;
            affinity[[j, i]] = a;
        }
    }
    Ok(affinity)
}

/// `L_sym = I - D^{-1/2} A D^{-1/2}` for a symmetric non-negative affinity.
fn sym_normalized_laplacian(affinity: &Array2<f64>) -> Result<Array2<f64>> {
    let v = affinity.nrows();
    let mut inv_sqrt_deg = Vec::with_capacity(v);
    for i in 0..v {
        let d: f64 = affinity.row(i).sum();
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::degenerate(format!(
                "affinity row {i} has non-positive degree {d}"
            )));
        }
        inv_sqrt_deg.push(1.0 / d.sqrt());
    }
    let mut lap = Array2::<f64>::zeros((v, v));
    for i in 0..v {
        for j in 0..v {
            let scaled = affinity[[i, j]] * inv_sqrt_deg[i] * inv_sqrt_deg[j];
            lap[[i, j]] = if i == j { 1.0 - scaled } else { -scaled };
        }
    }
    Ok(lap)
}

/// Relabels so that group ids appear in order of first occurrence:
/// client 0 is always in group 0.
fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut remap: BTreeMap<usize, usize> = BTreeMap::new();
    let mut next = 0;
    labels
        .iter()
        .map(|&raw| {
            *remap.entry(raw).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            })
        })
        .collect()
}

/// Spectral clustering on a precomputed affinity: embed into the `n`
/// smallest eigenvectors of the normalized Laplacian, rescale rows to unit
/// length, k-means. Returns one label per row, canonically numbered.
pub fn spectral_cluster(affinity: &Array2<f64>, n_groups: usize, seed: u64) -> Result<Vec<usize>> {
    let v = affinity.nrows();
    if affinity.ncols() != v {
        return Err(Error::config("affinity must be square"));
    }
    if n_groups == 0 {
        return Err(Error::config("n_groups must be >= 1"));
    }
    if v < n_groups {
        return Err(Error::config(format!(
            "cannot split {v} clients into {n_groups} groups"
        )));
    }

    let lap = sym_normalized_laplacian(affinity)?;
    let eig = jacobi_eigen(&lap, JACOBI_TOLERANCE, JACOBI_MAX_SWEEPS)?;

    let mut embedding = Array2::<f64>::zeros((v, n_groups));
    for col in 0..n_groups {
        embedding.column_mut(col).assign(&eig.vectors.column(col));
    }
    for mut row in embedding.rows_mut() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }

    let result = kmeans(&embedding, n_groups, seed, KMEANS_MAX_RESTARTS)?;
    Ok(canonical_labels(&result.assignment))
}

/// Everything the grouping step produces, kept together so callers can
/// report the intermediates alongside the assignment.
#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub assignment: GroupAssignment,
    /// Expected round latency per client id, the value behind the latency
    /// feature column.
    pub expected_latency_ms: Vec<f64>,
    pub affinity: Array2<f64>,
}

/// The full grouping pipeline: expected latencies and pretraining deltas
/// in, group assignment out.
pub fn cluster_clients(
    dataset: &FederatedDataset,
    profiles: &ProfileSet,
    cfg: &ClusterConfig,
) -> Result<ClusterOutcome> {
    cfg.validate()?;
    dataset.validate()?;
    profiles.validate()?;

    let v = dataset.num_clients();
    if v < cfg.n_groups {
        return Err(Error::config(format!(
            "cannot split {v} clients into {} groups",
            cfg.n_groups
        )));
    }
    if v < 2 {
        return Err(Error::config("grouping needs at least two clients"));
    }

    let by_id: BTreeMap<usize, _> = profiles.clients.iter().map(|p| (p.client_id, p)).collect();
    let mut latencies = Vec::with_capacity(v);
    for shard in &dataset.shards {
        let profile = by_id.get(&shard.client_id).ok_or_else(|| {
            Error::config(format!("no latency profile for client {}", shard.client_id))
        })?;
        latencies.push(expected_total_latency_ms(
            profile,
            &profiles.system,
            cfg.noise_bandwidth,
        ));
    }

    let deltas = pretrain_deltas(dataset, &cfg.pretrain, cfg.seed)?;
    let sim = build_similarity_matrix(&latencies, &deltas, cfg.beta, cfg.normalization)?;
    let affinity = gaussian_affinity(&sim, cfg.sigma, cfg.affinity_exponent)?;
    let labels = spectral_cluster(&affinity, cfg.n_groups, cfg.seed)?;

    let assignment = GroupAssignment::from_labels(&labels)?;
    if assignment.n_groups() < cfg.n_groups {
        log::warn!(
            "requested {} groups but only {} were distinguishable",
            cfg.n_groups,
            assignment.n_groups()
        );
    }
    Ok(ClusterOutcome {
        assignment,
        expected_latency_ms: latencies,
        affinity,
    })
}
