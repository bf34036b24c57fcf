//! Multinomial logistic regression and federated averaging.
//!
//! The model is a single linear layer: for classes `C` and features `F`,
//! logits are `z = W x + b` with `W : C x F`, `b : C`, and the loss is the
//! mean cross-entropy `-log softmax(z)[y]` over a batch. Local training is
//! plain mini-batch SGD: per epoch the shard is reshuffled (Fisher-Yates,
//! seeded), split into batches of `batch_size` keeping the final partial
//! batch, and each batch applies one gradient step
//!
//! ```text
//! grad_W = (softmax(z) - onehot(y))^T X / |batch|
//! ```
//!
//! Aggregation is FedAvg: parameters averaged with weights `n_i / sum(n_j)`.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::{Error, Result};

/// Dense parameters of the multinomial logistic regression model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Class-by-feature weight matrix, `C x F`.
    pub weights: Array2<f64>,
    /// Per-class bias, length `C`.
    pub bias: Array1<f64>,
}

impl ModelParams {
    /// The all-zero model, the starting point of every experiment.
    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        ModelParams {
            weights: Array2::zeros((num_classes, feature_dim)),
            bias: Array1::zeros(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn check_same_shape(&self, other: &ModelParams, what: &str) -> Result<()> {
        if self.weights.dim() != other.weights.dim() || self.bias.len() != other.bias.len() {
            return Err(Error::config(format!(
                "{what}: parameter shapes differ ({}x{} vs {}x{})",
                self.num_classes(),
                self.feature_dim(),
                other.num_classes(),
                other.feature_dim()
            )));
        }
        Ok(())
    }
}

/// Hyperparameters of one local training pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Flattened parameter delta: row-major weights followed by bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatDelta {
    pub values: Vec<f64>,
}

impl FlatDelta {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Index of the largest logit, ties resolved to the lowest class id.
fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `log(sum(exp(z)))` computed against the row maximum so large logits
/// cannot overflow.
fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn check_samples(params: &ModelParams, samples: &[Sample], what: &str) -> Result<()> {
    for s in samples {
        if s.features.len() != params.feature_dim() {
            return Err(Error::config(format!(
                "{what}: sample has {} features, model expects {}",
                s.features.len(),
                params.feature_dim()
            )));
        }
        if s.label >= params.num_classes() {
            return Err(Error::config(format!(
                "{what}: label {} out of range for {} classes",
                s.label,
                params.num_classes()
            )));
        }
    }
    Ok(())
}

/// Runs `local_epochs` of seeded mini-batch SGD on one client's shard and
/// returns the updated parameters. The starting parameters are not mutated;
/// the same `(start, shard, cfg, rng_seed)` always yields the same result.
pub fn client_update(
    start: &ModelParams,
    train: &[Sample],
    cfg: &TrainingConfig,
    rng_seed: u64,
) -> Result<ModelParams> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("client_update requires a non-empty shard"));
    }
    check_samples(start, train, "client_update")?;

    let n = train.len();
    let f = start.feature_dim();
    let c = start.num_classes();
    let mut w = start.weights.clone();
    let mut b = start.bias.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut order: Vec<usize> = (0..n).collect();

    let max_bs = cfg.batch_size.min(n);
    let mut xb = Array2::<f64>::zeros((max_bs, f));
    let mut zb = Array2::<f64>::zeros((max_bs, c));

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut i = 0;
        while i < n {
            let bs = cfg.batch_size.min(n - i);
            for (r, &idx) in order[i..i + bs].iter().enumerate() {
                xb.row_mut(r)
                    .assign(&ndarray::ArrayView1::from(&train[idx].features[..]));
            }
            let x = xb.slice(s![..bs, ..]);
            let mut z = zb.slice_mut(s![..bs, ..]);
            z.assign(&x.dot(&w.t()));
            z += &b;

            // In place: z becomes softmax(z) - onehot(y).
            for (r, &idx) in order[i..i + bs].iter().enumerate() {
                let mut row = z.row_mut(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                row.mapv_inplace(|v| {
                    let e = (v - m).exp();
                    sum += e;
                    e
                });
                row.mapv_inplace(|v| v / sum);
                row[train[idx].label] -= 1.0;
            }

            let scale = -cfg.learning_rate / bs as f64;
            let grad_w = z.t().dot(&x);
            w.scaled_add(scale, &grad_w);
            let grad_b = z.sum_axis(Axis(0));
            b.scaled_add(scale, &grad_b);
            i += bs;
        }
    }

    Ok(ModelParams { weights: w, bias: b })
}

/// Accuracy and mean cross-entropy of `params` on `samples`. Prediction is
/// the argmax logit with ties going to the lowest class id.
pub fn evaluate(params: &ModelParams, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::config("evaluate requires at least one sample"));
    }
    check_samples(params, samples, "evaluate")?;

    let c = params.num_classes();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut z = vec![0.0; c];
    for s in samples {
        let x = ndarray::ArrayView1::from(&s.features[..]);
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = params.weights.row(k).dot(&x) + params.bias[k];
        }
        if argmax_lowest(&z) == s.label {
            correct += 1;
        }
        loss_sum += log_sum_exp(&z) - z[s.label];
    }
    let n = samples.len() as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

/// `after - before`, flattened row-major weights first and bias last.
pub fn flatten_delta(after: &ModelParams, before: &ModelParams) -> Result<FlatDelta> {
    after.check_same_shape(before, "flatten_delta")?;
    let mut values = Vec::with_capacity(after.weights.len() + after.bias.len());
    for (a, b) in after.weights.iter().zip(before.weights.iter()) {
        values.push(a - b);
    }
    for (a, b) in after.bias.iter().zip(before.bias.iter()) {
        values.push(a - b);
    }
    Ok(FlatDelta { values })
}

/// FedAvg: the weighted average of the contributed parameters, weight
/// `n_i / sum(n_j)`. Order of contributions does not change the result
/// beyond floating-point reassociation.
pub fn fedavg_aggregate(contributions: &[(ModelParams, usize)]) -> Result<ModelParams> {
    let first = contributions
        .first()
        .ok_or_else(|| Error::config("fedavg_aggregate requires at least one contribution"))?;
    let total: usize = contributions.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::config("fedavg_aggregate: total weight is zero"));
    }
    let mut acc = ModelParams::zeros(first.0.num_classes(), first.0.feature_dim());
    for (params, n) in contributions {
        params.check_same_shape(&first.0, "fedavg_aggregate")?;
        let w = *n as f64 / total as f64;
        acc.weights.scaled_add(w, &params.weights);
        acc.bias.scaled_add(w, &params.bias);
    }
    Ok(acc)
}

/// Writes parameters as a text block: a `params,<C>,<F>` header, one line of
/// comma-separated weights per class, then one line with the biases. Numbers
/// use the shortest representation that parses back to the same f64.
pub fn save_params(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "params,{},{}\n",
        params.num_classes(),
        params.feature_dim()
    ));
    for row in params.weights.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    let line: Vec<String> = params.bias.iter().map(|v| v.to_string()).collect();
    out.push_str(&line.join(","));
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a parameter block written by [`save_params`].
pub fn load_params(path: &std::path::Path) -> Result<ModelParams> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(&name, 1, "empty file"))?;
    let fields: Vec<&str> = header.split(',').collect();
    if fields.len() != 3 || fields[0] != "params" {
        return Err(Error::parse(&name, 1, "expected header `params,<C>,<F>`"));
    }
    let c: usize = fields[1]
        .parse()
        .map_err(|_| Error::parse(&name, 1, format!("bad class count {:?}", fields[1])))?;
    let f: usize = fields[2]
        .parse()
        .map_err(|_| Error::parse(&name, 1, format!("bad feature count {:?}", fields[2])))?;

    let mut parse_row = |expected: usize| -> Result<Vec<f64>> {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::parse(&name, 0, "unexpected end of file"))?;
        let vals: std::result::Result<Vec<f64>, _> =
            line.split(',').map(str::parse::<f64>).collect();
        let vals =
            vals.map_err(|e| Error::parse(&name, idx + 1, format!("bad number: {e}")))?;
        if vals.len() != expected {
            return Err(Error::parse(
                &name,
                idx + 1,
                format!("expected {expected} values, got {}", vals.len()),
            ));
        }
        Ok(vals)
    };

    let mut weights = Array2::zeros((c, f));
    for k in 0..c {
        let row = parse_row(f)?;
        weights
            .row_mut(k)
            .assign(&ndarray::ArrayView1::from(&row[..]));
    }
    let bias = Array1::from_vec(parse_row(c)?);
    Ok(ModelParams { weights, bias })
}
