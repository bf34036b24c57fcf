//! Client latency models.
//!
//! Computation time for one local update follows a shift-exponential law:
//! the CDF is `P[t <= T] = 1 - exp(-(mu/d) * (T - x*d))` for `T >= x*d`,
//! where `d` is the client's sample count, `x` the per-sample floor in
//! ms/sample, and `mu` the fluctuation rate in samples/ms. Sampling inverts
//! the CDF: `t = x*d - (d/mu) * ln(1 - u)`; the expectation is
//! `x*d + d/mu`.
//!
//! Communication time comes from a link budget evaluated in the dB domain:
//!
//! ```text
//! path_loss_db = 100.7 + 23.5 * log10(distance_km)
//! noise_dbm    = noise_dbm_per_hz + 10 * log10(noise_bandwidth_hz)
//! snr_db       = power_dbm - path_loss_db - noise_dbm   (clamped to [-50, 150])
//! capacity     = share * bandwidth_hz * log2(1 + 10^(snr_db / 10))   bits/s
//! latency_ms   = 1000 * model_size_bits / capacity
//! ```
//!
//! All latencies in this crate are in milliseconds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, StreamKind};
use crate::{Error, Result};

/// Lower and upper clamp for the signal-to-noise ratio in dB. Keeps the
/// capacity positive and finite for any physically silly configuration.
pub const SNR_CLAMP_DB: (f64, f64) = (-50.0, 150.0);

/// Static description of one client's compute and radio characteristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub client_id: usize,
    /// Local sample count `d`; drives both computation terms.
    pub data_size: usize,
    /// Per-sample computation floor `x`, ms per sample.
    pub x_ms_per_sample: f64,
    /// Fluctuation rate `mu`, samples per ms; `d / mu` is the mean overshoot.
    pub mu: f64,
    /// Transmit power, dBm.
    pub power_dbm: f64,
    /// Fraction of the system bandwidth allocated to this client, in (0, 1].
    pub bandwidth_share: f64,
    /// Distance to the aggregator, km.
    pub distance_km: f64,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.data_size == 0 {
            return Err(Error::config(format!(
                "client {}: data_size must be >= 1",
                self.client_id
            )));
        }
        let positive = [
            ("x_ms_per_sample", self.x_ms_per_sample),
            ("mu", self.mu),
            ("distance_km", self.distance_km),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "client {}: {name} must be finite and > 0, got {v}",
                    self.client_id
                )));
            }
        }
        if !(self.bandwidth_share > 0.0 && self.bandwidth_share <= 1.0) {
            return Err(Error::config(format!(
                "client {}: bandwidth_share must be in (0, 1], got {}",
                self.client_id, self.bandwidth_share
            )));
        }
        if !self.power_dbm.is_finite() {
            return Err(Error::config(format!(
                "client {}: power_dbm must be finite",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// Shared radio parameters of the federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSystem {
    pub total_bandwidth_hz: f64,
    pub noise_dbm_per_hz: f64,
    pub model_size_bits: f64,
}

impl RadioSystem {
    pub fn validate(&self) -> Result<()> {
        if !(self.total_bandwidth_hz > 0.0 && self.total_bandwidth_hz.is_finite()) {
            return Err(Error::config("total_bandwidth_hz must be finite and > 0"));
        }
        if !self.noise_dbm_per_hz.is_finite() {
            return Err(Error::config("noise_dbm_per_hz must be finite"));
        }
        if !(self.model_size_bits > 0.0 && self.model_size_bits.is_finite()) {
            return Err(Error::config("model_size_bits must be finite and > 0"));
        }
        Ok(())
    }
}

/// Which bandwidth enters the noise power term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseBandwidth {
    /// Noise over the client's allocated slice `share * W` (default).
    #[default]
    Allocated,
    /// Noise over the full system bandwidth `W`.
    Total,
}

/// Divisor used when normalizing latencies for the similarity features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide the centered latency by the population variance, as printed
    /// in the source formula (default).
    #[default]
    Variance,
    /// Divide by the standard deviation (a conventional z-score).
    StdDev,
    /// Z-score of the natural log of each latency. Scale-invariant: equal
    /// latency *ratios* map to equal distances, which keeps heavy-tailed
    /// fleets from collapsing into one undifferentiated fast blob.
    Log,
}

/// CDF of the computation latency at `t_ms`. Zero for `t <= x*d`.
pub fn computation_latency_cdf(profile: &ClientProfile, t_ms: f64) -> f64 {
    let d = profile.data_size as f64;
    let floor = profile.x_ms_per_sample * d;
    if t_ms <= floor {
        0.0
    } else {
        1.0 - (-(profile.mu / d) * (t_ms - floor)).exp()
    }
}

/// Draws one computation latency by inverse CDF:
/// `t = x*d - (d/mu) * ln(1 - u)` with `u` uniform in [0, 1). The result is
/// always at least `x * d`.
pub fn sample_computation_latency(profile: &ClientProfile, rng: &mut impl Rng) -> f64 {
    let d = profile.data_size as f64;
    let u: f64 = rng.gen::<f64>();
    profile.x_ms_per_sample * d - (d / profile.mu) * (1.0 - u).ln()
}

/// Mean of the computation latency: `x*d + d/mu`.
pub fn expected_computation_latency(profile: &ClientProfile) -> f64 {
    let d = profile.data_size as f64;
    profile.x_ms_per_sample * d + d / profile.mu
}

/// Distance-driven path loss in dB.
pub fn path_loss_db(distance_km: f64) -> f64 {
    100.7 + 23.5 * distance_km.log10()
}

/// Deterministic uplink latency for shipping one model update, in ms.
pub fn communication_latency_ms(
    profile: &ClientProfile,
    system: &RadioSystem,
    noise_bandwidth: NoiseBandwidth,
) -> f64 {
    let allocated_hz = profile.bandwidth_share * system.total_bandwidth_hz;
    let noise_hz = match noise_bandwidth {
        NoiseBandwidth::Allocated => allocated_hz,
        NoiseBandwidth::Total => system.total_bandwidth_hz,
    };
    let noise_dbm = system.noise_dbm_per_hz + 10.0 * noise_hz.log10();
    let snr_db = (profile.power_dbm - path_loss_db(profile.distance_km) - noise_dbm)
        .clamp(SNR_CLAMP_DB.0, SNR_CLAMP_DB.1);
    let capacity_bps = allocated_hz * (1.0 + 10f64.powf(snr_db / 10.0)).log2();
    1000.0 * system.model_size_bits / capacity_bps
}

/// Expected total update latency: communication plus expected computation.
pub fn expected_total_latency_ms(
    profile: &ClientProfile,
    system: &RadioSystem,
    noise_bandwidth: NoiseBandwidth,
) -> f64 {
    communication_latency_ms(profile, system, noise_bandwidth)
        + expected_computation_latency(profile)
}

/// Sampled total update latency: communication plus one computation draw.
pub fn sample_total_latency_ms(
    profile: &ClientProfile,
    system: &RadioSystem,
    noise_bandwidth: NoiseBandwidth,
    rng: &mut impl Rng,
) -> f64 {
    communication_latency_ms(profile, system, noise_bandwidth)
        + sample_computation_latency(profile, rng)
}

/// Centers latencies on their mean and divides by the population variance
/// (or standard deviation, per `normalization`); `Log` variants z-score the
/// natural log of each latency instead.
///
/// Needs at least two values; zero variance is reported as a degenerate
/// input so callers can choose a fallback.
pub fn normalize_latencies(latencies: &[f64], normalization: Normalization) -> Result<Vec<f64>> {
    if latencies.len() < 2 {
        return Err(Error::config(
            "normalize_latencies needs at least two values",
        ));
    }
    let values: Vec<f64> = match normalization {
        Normalization::Log => {
            if latencies.iter().any(|t| *t <= 0.0 || t.is_nan()) {
                return Err(Error::config(
                    "log normalization requires strictly positive latencies",
                ));
            }
            latencies.iter().map(|t| t.ln()).collect()
        }
        Normalization::Variance | Normalization::StdDev => latencies.to_vec(),
    };
    let n = values.len() as f64;
    let avg = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|t| (t - avg).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::degenerate(
            "normalize_latencies: all latencies are equal (zero variance)",
        ));
    }
    let divisor = match normalization {
        Normalization::Variance => var,
        Normalization::StdDev | Normalization::Log => var.sqrt(),
    };
    Ok(values.iter().map(|t| (t - avg) / divisor).collect())
}

/// A client roster plus the radio parameters they share; the on-disk
/// profiles file is the JSON form of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSet {
    pub system: RadioSystem,
    pub clients: Vec<ClientProfile>,
}

impl ProfileSet {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.clients {
            p.validate()?;
            if !seen.insert(p.client_id) {
                return Err(Error::config(format!(
                    "duplicate client_id {} in profiles",
                    p.client_id
                )));
            }
        }
        Ok(())
    }

    pub fn client(&self, id: usize) -> Option<&ClientProfile> {
        self.clients.iter().find(|p| p.client_id == id)
    }
}

pub fn save_profiles(set: &ProfileSet, path: &std::path::Path) -> Result<()> {
    set.validate()?;
    let text = serde_json::to_string_pretty(set).map_err(|e| Error::Json {
        context: format!("serializing profiles to {}", path.display()),
        source: e,
    })?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_profiles(path: &std::path::Path) -> Result<ProfileSet> {
    let text = std::fs::read_to_string(path)?;
    let set: ProfileSet = serde_json::from_str(&text).map_err(|e| Error::Json {
        context: format!("parsing profiles file {}", path.display()),
        source: e,
    })?;
    set.validate()?;
    Ok(set)
}

/// Uniform sampling ranges for profile synthesis, one `(low, high)` pair
/// per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRanges {
    pub x_ms_per_sample: (f64, f64),
    pub mu: (f64, f64),
    pub power_dbm: (f64, f64),
    pub bandwidth_share: (f64, f64),
    pub distance_km: (f64, f64),
}

impl Default for ProfileRanges {
    fn default() -> Self {
        ProfileRanges {
            x_ms_per_sample: (0.5, 5.0),
            mu: (0.05, 0.5),
            power_dbm: (10.0, 30.0),
            bandwidth_share: (0.05, 0.2),
            distance_km: (0.1, 2.0),
        }
    }
}

impl ProfileRanges {
    fn validate(&self) -> Result<()> {
        let pairs = [
            ("x_ms_per_sample", self.x_ms_per_sample),
            ("mu", self.mu),
            ("power_dbm", self.power_dbm),
            ("bandwidth_share", self.bandwidth_share),
            ("distance_km", self.distance_km),
        ];
        for (name, (lo, hi)) in pairs {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(format!(
                    "profile range {name} must satisfy low <= high, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Synthesizes one profile per entry of `data_sizes` (client `k` gets
/// `data_sizes[k]`), drawing each field uniformly from its range with a
/// per-client derived stream. Deterministic in `seed`.
pub fn generate_profiles(
    data_sizes: &[usize],
    ranges: &ProfileRanges,
    seed: u64,
) -> Result<Vec<ClientProfile>> {
    ranges.validate()?;
    let draw = |rng: &mut rand_chacha::ChaCha20Rng, (lo, hi): (f64, f64)| -> f64 {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    data_sizes
        .iter()
        .enumerate()
        .map(|(k, &d)| {
            let mut rng = stream(seed, StreamKind::ProfileGen, &[k as u64]);
            let p = ClientProfile {
                client_id: k,
                data_size: d,
                x_ms_per_sample: draw(&mut rng, ranges.x_ms_per_sample),
                mu: draw(&mut rng, ranges.mu),
                power_dbm: draw(&mut rng, ranges.power_dbm),
                bandwidth_share: draw(&mut rng, ranges.bandwidth_share),
                distance_km: draw(&mut rng, ranges.distance_km),
            };
            p.validate()?;
            Ok(p)
        })
        .collect()
}
