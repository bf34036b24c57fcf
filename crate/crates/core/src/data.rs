//! Federated datasets: generation, partitioning, and persistence.
//!
//! Two ways to build a federation:
//!
//! - [`generate_synthetic`] draws a non-IID classification dataset where
//!   `alpha` controls how much each client's ground-truth model deviates
//!   from a shared base and `beta` controls how much the per-client feature
//!   distribution deviates. Per-client sample counts follow a power law.
//! - [`partition_by_power_law`] splits an existing labeled pool across
//!   clients, restricting every client to a fixed number of distinct
//!   classes and skewing shard sizes by the same power law.
//!
//! Datasets persist as line-delimited UTF-8 text: one dataset header, one
//! header per client shard, one sample per line.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, StreamKind};
use crate::{Error, Result};

/// One labeled observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// One client's local data, already split into train and test.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientShard {
    pub fn total_len(&self) -> usize {
        self.train.len() + self.test.len()
    }
}

/// A full federation: shards indexed by contiguous client ids from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedDataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub shards: Vec<ClientShard>,
}

impl FederatedDataset {
    pub fn num_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn total_train_samples(&self) -> usize {
        self.shards.iter().map(|s| s.train.len()).sum()
    }

    pub fn total_test_samples(&self) -> usize {
        self.shards.iter().map(|s| s.test.len()).sum()
    }

    /// Checks the structural invariants every consumer relies on:
    /// contiguous ids, in-range labels, uniform feature width, and a
    /// non-empty training split per shard.
    pub fn validate(&self) -> Result<()> {
        if self.shards.is_empty() {
            return Err(Error::config("dataset has no shards"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("dataset needs at least 2 classes"));
        }
        for (i, shard) in self.shards.iter().enumerate() {
            if shard.client_id != i {
                return Err(Error::config(format!(
                    "client ids must be contiguous from 0: position {i} holds id {}",
                    shard.client_id
                )));
            }
            if shard.train.is_empty() {
                return Err(Error::config(format!(
                    "client {i} has an empty training split"
                )));
            }
            for s in shard.train.iter().chain(shard.test.iter()) {
                if s.features.len() != self.feature_dim {
                    return Err(Error::config(format!(
                        "client {i}: sample has {} features, dataset declares {}",
                        s.features.len(),
                        self.feature_dim
                    )));
                }
                if s.label >= self.num_classes {
                    return Err(Error::config(format!(
                        "client {i}: label {} out of range ({} classes)",
                        s.label, self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Power-law shard sizing: client `k` gets
/// `min_per_client + round((k+1)^-exponent * scale)` samples, with `scale`
/// chosen so the total lands near `total_samples`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub min_per_client: usize,
    pub exponent: f64,
    pub total_samples: usize,
}

impl PowerLaw {
    pub fn validate(&self) -> Result<()> {
        if self.min_per_client == 0 {
            return Err(Error::config("power law min_per_client must be >= 1"));
        }
        if !(self.exponent >= 0.0 && self.exponent.is_finite()) {
            return Err(Error::config("power law exponent must be finite and >= 0"));
        }
        Ok(())
    }

    /// Per-client counts for `n` clients. Every count is at least
    /// `min_per_client`; the sum approaches `total_samples` up to rounding
    /// (or stays at `min * n` if the target is below that floor).
    pub fn counts(&self, n: usize) -> Vec<usize> {
        let raw: Vec<f64> = (0..n).map(|k| ((k + 1) as f64).powf(-self.exponent)).collect();
        let raw_sum: f64 = raw.iter().sum();
        let budget = self.total_samples.saturating_sub(self.min_per_client * n) as f64;
        let scale = if raw_sum > 0.0 { budget / raw_sum } else { 0.0 };
        raw.iter()
            .map(|r| self.min_per_client + (r * scale).round() as usize)
            .collect()
    }
}

/// Parameters of the synthetic non-IID generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Std-dev of the per-client ground-truth model offset.
    pub alpha: f64,
    /// Std-dev of the per-client feature-mean offset.
    pub beta: f64,
    pub num_clients: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub samples: PowerLaw,
    /// Fraction of each shard held out as test data, in [0, 1).
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be >= 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config("alpha and beta must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("test_fraction must be in [0, 1)"));
        }
        self.samples.validate()
    }
}

/// Per-client ground-truth parameters: a shared standard-normal base plus a
/// per-entry Gaussian offset whose scale is the heterogeneity knob. With
/// `alpha = 0` every client shares the exact same model, making zero a true
/// no-heterogeneity baseline; with `alpha > 0` the per-entry offsets change
/// which class each region of feature space maps to, so client labeling
/// functions genuinely diverge.
struct GroundTruth {
    weights: Array2<f64>,
    bias: Array1<f64>,
    feature_means: Array1<f64>,
}

fn ground_truths(cfg: &SyntheticConfig) -> Vec<GroundTruth> {
    let c = cfg.num_classes;
    let f = cfg.feature_dim;
    let mut shared = stream(cfg.seed, StreamKind::SyntheticShared, &[]);
    let base_w = Array2::from_shape_fn((c, f), |_| shared.sample::<f64, _>(StandardNormal));
    let base_b = Array1::from_shape_fn(c, |_| shared.sample::<f64, _>(StandardNormal));
    let base_v = Array1::from_shape_fn(f, |_| shared.sample::<f64, _>(StandardNormal));

    (0..cfg.num_clients)
        .map(|k| {
            let mut rng = stream(cfg.seed, StreamKind::SyntheticClient, &[k as u64, 0]);
            let weights = base_w.mapv(|w| w + cfg.alpha * rng.sample::<f64, _>(StandardNormal));
            let bias = base_b.mapv(|b| b + cfg.alpha * rng.sample::<f64, _>(StandardNormal));
            let feature_means =
                base_v.mapv(|v| v + cfg.beta * rng.sample::<f64, _>(StandardNormal));
            GroundTruth {
                weights,
                bias,
                feature_means,
            }
        })
        .collect()
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Splits a shard's samples into train/test. The test share is
/// `round(n * fraction)` clamped so training keeps at least one sample;
/// the test split may be empty only when the rounded share is zero.
fn split_train_test(
    mut samples: Vec<Sample>,
    fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<Sample>, Vec<Sample>) {
    samples.shuffle(rng);
    let n = samples.len();
    let n_test = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1));
    let test = samples.split_off(n - n_test);
    (samples, test)
}

/// Generates the synthetic federation. Deterministic in `cfg.seed`.
///
/// Client `k` draws a model `W_k = W + alpha * Z_k`, `b_k = b + alpha * z_k`
/// with per-entry standard-normal offsets `Z_k, z_k` around the shared base
/// `(W, b)`, and features `x ~ Normal(v_k, Sigma)` with
/// `v_k = v + beta * z'_k` (again per entry) and diagonal
/// `Sigma_jj = j^-1.2` (1-indexed). Labels are `argmax(W_k x + b_k)`, ties
/// to the lowest class.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<FederatedDataset> {
    cfg.validate()?;
    let f = cfg.feature_dim;
    let truths = ground_truths(cfg);
    let counts = cfg.samples.counts(cfg.num_clients);
    // Sigma_jj = j^-1.2, so the per-coordinate std-dev is j^-0.6.
    let feature_std: Vec<f64> = (0..f).map(|j| ((j + 1) as f64).powf(-0.6)).collect();

    let mut shards = Vec::with_capacity(cfg.num_clients);
    for (k, truth) in truths.iter().enumerate() {
        let mut rng = stream(cfg.seed, StreamKind::SyntheticClient, &[k as u64, 1]);
        let mut samples = Vec::with_capacity(counts[k]);
        let mut logits = vec![0.0; cfg.num_classes];
        for _ in 0..counts[k] {
            let features: Vec<f64> = (0..f)
                .map(|j| truth.feature_means[j] + feature_std[j] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let x = ndarray::ArrayView1::from(&features[..]);
            for (c, z) in logits.iter_mut().enumerate() {
                *z = truth.weights.row(c).dot(&x) + truth.bias[c];
            }
            samples.push(Sample {
                features,
                label: argmax_lowest(&logits),
            });
        }
        let (train, test) = split_train_test(samples, cfg.test_fraction, &mut rng);
        shards.push(ClientShard {
            client_id: k,
            train,
            test,
        });
    }

    let ds = FederatedDataset {
        num_classes: cfg.num_classes,
        feature_dim: f,
        shards,
    };
    ds.validate()?;
    Ok(ds)
}

/// Result of partitioning a pool: the dataset plus how many pool samples
/// could not be assigned because no client owns their class.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionOutcome {
    pub dataset: FederatedDataset,
    pub dropped_samples: usize,
}

/// Partitions an existing labeled pool across `num_clients` clients.
///
/// Each client owns `classes_per_client` distinct classes (assigned
/// round-robin over the sorted label set), and samples of each class are
/// divided among its owners proportionally to power-law size targets via
/// largest-remainder rounding, so every sample of an owned class is
/// assigned exactly once. Samples of classes without any owner are dropped
/// and counted.
pub fn partition_by_power_law(
    pool: &[Sample],
    num_clients: usize,
    classes_per_client: usize,
    min_per_client: usize,
    exponent: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<PartitionOutcome> {
    if pool.is_empty() {
        return Err(Error::config("partition pool is empty"));
    }
    if num_clients == 0 {
        return Err(Error::config("num_clients must be >= 1"));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config("test_fraction must be in [0, 1)"));
    }
    let feature_dim = pool[0].features.len();
    let mut labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if classes_per_client == 0 || classes_per_client > labels.len() {
        return Err(Error::config(format!(
            "classes_per_client must be in 1..={} (distinct labels), got {classes_per_client}",
            labels.len()
        )));
    }

    // Shuffled per-class sample indices.
    let by_class: Vec<(usize, Vec<usize>)> = labels
        .iter()
        .map(|&lab| {
            let mut idx: Vec<usize> = pool
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == lab)
                .map(|(i, _)| i)
                .collect();
            idx.shuffle(&mut stream(seed, StreamKind::PartitionPool, &[lab as u64]));
            (lab, idx)
        })
        .collect();

    // Round-robin class ownership: client k takes classes
    // (k * cpc + j) mod |labels| for j in 0..cpc.
    let lc = labels.len();
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); lc];
    for k in 0..num_clients {
        for j in 0..classes_per_client {
            owners[(k * classes_per_client + j) % lc].push(k);
        }
    }

    let usable: usize = by_class
        .iter()
        .enumerate()
        .filter(|(ci, _)| !owners[*ci].is_empty())
        .map(|(_, (_, idx))| idx.len())
        .sum();
    let dropped_samples = pool.len() - usable;

    let targets = PowerLaw {
        min_per_client,
        exponent,
        total_samples: usable,
    }
    .counts(num_clients);

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (ci, (_, idx)) in by_class.iter().enumerate() {
        let own = &owners[ci];
        if own.is_empty() {
            continue;
        }
        let weight_sum: f64 = own.iter().map(|&k| targets[k] as f64).sum();
        // Largest-remainder shares of this class among its owners.
        let mut shares: Vec<usize> = Vec::with_capacity(own.len());
        let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(own.len());
        let mut used = 0usize;
        for (pos, &k) in own.iter().enumerate() {
            let exact = idx.len() as f64 * targets[k] as f64 / weight_sum;
            let fl = exact.floor() as usize;
            shares.push(fl);
            used += fl;
            fracs.push((exact - fl as f64, pos));
        }
        let mut leftover = idx.len() - used;
        fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, pos) in fracs.iter() {
            if leftover == 0 {
                break;
            }
            shares[pos] += 1;
            leftover -= 1;
        }
        let mut cursor = 0;
        for (pos, &k) in own.iter().enumerate() {
            assigned[k].extend_from_slice(&idx[cursor..cursor + shares[pos]]);
            cursor += shares[pos];
        }
    }

    let mut shards = Vec::with_capacity(num_clients);
    for (k, idxs) in assigned.into_iter().enumerate() {
        if idxs.is_empty() {
            return Err(Error::degenerate(format!(
                "pool too small: client {k} received no samples"
            )));
        }
        let samples: Vec<Sample> = idxs.into_iter().map(|i| pool[i].clone()).collect();
        let mut rng = stream(seed, StreamKind::SplitShard, &[k as u64]);
        let (train, test) = split_train_test(samples, test_fraction, &mut rng);
        shards.push(ClientShard {
            client_id: k,
            train,
            test,
        });
    }

    let num_classes = labels.iter().copied().max().unwrap() + 1;
    let dataset = FederatedDataset {
        num_classes: num_classes.max(2),
        feature_dim,
        shards,
    };
    dataset.validate()?;
    Ok(PartitionOutcome {
        dataset,
        dropped_samples,
    })
}

/// Writes a dataset as line-delimited text:
///
/// ```text
/// dataset,<num_classes>,<feature_dim>,<num_clients>
/// client,<id>,<n_train>,<n_test>
/// <id>,train,<label>,<f0>,...,<fF-1>
/// <id>,test,<label>,<f0>,...
/// ```
///
/// Floats use the shortest form that parses back to the identical bits, so
/// save followed by load reproduces the dataset exactly.
pub fn save_dataset(ds: &FederatedDataset, path: &std::path::Path) -> Result<()> {
    ds.validate()?;
    let mut out = String::new();
    out.push_str(&format!(
        "dataset,{},{},{}\n",
        ds.num_classes,
        ds.feature_dim,
        ds.num_clients()
    ));
    for shard in &ds.shards {
        out.push_str(&format!(
            "client,{},{},{}\n",
            shard.client_id,
            shard.train.len(),
            shard.test.len()
        ));
        for (split, samples) in [("train", &shard.train), ("test", &shard.test)] {
            for s in samples {
                out.push_str(&format!("{},{},{}", shard.client_id, split, s.label));
                for v in &s.features {
                    out.push(',');
                    out.push_str(&v.to_string());
                }
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`], validating structure as it
/// goes; errors name the offending line.
pub fn load_dataset(path: &std::path::Path) -> Result<FederatedDataset> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(&name, 1, "empty file"))?;
    let h: Vec<&str> = header.split(',').collect();
    if h.len() != 4 || h[0] != "dataset" {
        return Err(Error::parse(
            &name,
            1,
            "expected header `dataset,<classes>,<features>,<clients>`",
        ));
    }
    let parse_usize = |s: &str, line: usize, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::parse(&name, line, format!("bad {what}: {s:?}")))
    };
    let num_classes = parse_usize(h[1], 1, "class count")?;
    let feature_dim = parse_usize(h[2], 1, "feature dim")?;
    let num_clients = parse_usize(h[3], 1, "client count")?;

    let mut shards = Vec::with_capacity(num_clients);
    for _ in 0..num_clients {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::parse(&name, 0, "unexpected end of file: missing client header"))?;
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 4 || c[0] != "client" {
            return Err(Error::parse(
                &name,
                ln + 1,
                "expected `client,<id>,<n_train>,<n_test>`",
            ));
        }
        let client_id = parse_usize(c[1], ln + 1, "client id")?;
        let n_train = parse_usize(c[2], ln + 1, "train count")?;
        let n_test = parse_usize(c[3], ln + 1, "test count")?;

        let mut read_samples = |count: usize, split: &str| -> Result<Vec<Sample>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let (ln, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(&name, 0, "unexpected end of file: missing sample"))?;
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 3 + feature_dim {
                    return Err(Error::parse(
                        &name,
                        ln + 1,
                        format!("expected {} fields, got {}", 3 + feature_dim, fields.len()),
                    ));
                }
                if parse_usize(fields[0], ln + 1, "client id")? != client_id {
                    return Err(Error::parse(&name, ln + 1, "sample client id mismatch"));
                }
                if fields[1] != split {
                    return Err(Error::parse(
                        &name,
                        ln + 1,
                        format!("expected split {split:?}, got {:?}", fields[1]),
                    ));
                }
                let label = parse_usize(fields[2], ln + 1, "label")?;
                if label >= num_classes {
                    return Err(Error::parse(
                        &name,
                        ln + 1,
                        format!("label {label} out of range ({num_classes} classes)"),
                    ));
                }
                let features: std::result::Result<Vec<f64>, _> =
                    fields[3..].iter().map(|s| s.parse::<f64>()).collect();
                let features = features
                    .map_err(|e| Error::parse(&name, ln + 1, format!("bad feature value: {e}")))?;
                out.push(Sample { features, label });
            }
            Ok(out)
        };

        let train = read_samples(n_train, "train")?;
        let test = read_samples(n_test, "test")?;
        shards.push(ClientShard {
            client_id,
            train,
            test,
        });
    }
    if let Some((ln, line)) = lines.next() {
        if !line.trim().is_empty() {
            return Err(Error::parse(&name, ln + 1, "trailing content after last shard"));
        }
    }

    let ds = FederatedDataset {
        num_classes,
        feature_dim,
        shards,
    };
    ds.validate()?;
    Ok(ds)
}
