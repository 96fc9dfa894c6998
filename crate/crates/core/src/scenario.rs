//! Scenario configuration and the four end-to-end pipelines.
//!
//! A run produces an in-memory bundle of output files keyed by relative
//! path, so callers decide where (and whether) to write them.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clocks::{ClockModel, ClockParams, SteeringCommand, RATE_CLAMP};
use crate::correlate::{bin, cross_correlate, measure_offset, CorrelateError, CorrelationHistogram, CorrelatorConfig};
use crate::engine::{Scheduler, SimDuration, SimInstant};
use crate::optics::{
    detect, detector_fires, generate_cw, generate_pulsed, propagate, stamp, Arrival, ChannelModel, DetectorModel,
    PairEmission, PhotonTag,
};
use crate::qkd::{
    chsh, classify_phase, franson_coincidence_probability, qber, sample_polarization_pair, sample_time_bin_pair,
    sift, sifted_keys, AnalyzerSettings, BasisFilter, ChshSettings, PhaseClass, PulsedPairState, SiftedPair,
    WindowLayout,
};
use crate::records::{self, on_channel, sort_by_reading, AgentId, DetectionRecord};
use crate::steer::{
    bidirectional_solve, einstein_residual, steering_csv, BidirectionalSample, Convergence, EinsteinProbe,
    OffsetLoopState, PhaseLoopState, RateLoopState, SteeringLogEntry, WindowClass,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },
}

fn config_err(path: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Config { path: path.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    PulsedLogicalSync,
    CwOffsetQkd,
    CwRateSteerQkd,
    BidirectionalSync,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::PulsedLogicalSync => "pulsed_logical_sync",
            Experiment::CwOffsetQkd => "cw_offset_qkd",
            Experiment::CwRateSteerQkd => "cw_rate_steer_qkd",
            Experiment::BidirectionalSync => "bidirectional_sync",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Cw { rate_per_s: f64 },
    Pulsed { period_ps: i64, efficiency: f64 },
}

impl SourceConfig {
    /// Mean pair rate.
    pub fn mean_rate_per_s(&self) -> f64 {
        match *self {
            SourceConfig::Cw { rate_per_s } => rate_per_s,
            SourceConfig::Pulsed { period_ps, efficiency } => efficiency / (period_ps as f64 * 1e-12),
        }
    }
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Cw { rate_per_s: 1e4 }
    }
}

/// Propagation paths. `sa`/`sb` run from a central source to each agent;
/// `ab`/`ba` run between the agents in the two-way setup.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSet {
    pub sa: ChannelModel,
    pub sb: ChannelModel,
    pub ab: ChannelModel,
    pub ba: ChannelModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerAgent<T> {
    pub a: T,
    pub b: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    Offset,
    #[default]
    OffsetRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub mode: LoopMode,
    pub offset_gain: f64,
    pub rate_gain: f64,
    pub epoch_ps: i64,
    pub convergence: Convergence,
    pub phase_gain: f64,
    pub phase_damping: f64,
    pub avg_window: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            mode: LoopMode::OffsetRate,
            offset_gain: 0.5,
            rate_gain: 0.3,
            epoch_ps: 200_000_000_000,
            convergence: Convergence::default(),
            phase_gain: 0.2,
            phase_damping: 1.0,
            avg_window: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingsKind {
    /// Rectilinear and diagonal bases on both sides; yields a key.
    #[default]
    Bbm92,
    /// CHSH analyzer angles; yields an S value.
    Chsh,
}

impl SettingsKind {
    pub fn analyzers(self) -> AnalyzerSettings {
        match self {
            SettingsKind::Bbm92 => AnalyzerSettings::key_distribution(),
            SettingsKind::Chsh => AnalyzerSettings::chsh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QkdConfig {
    pub settings: SettingsKind,
    pub intrinsic_error: f64,
    pub window_ps: i64,
    /// Deliberate sifting offset error, in units of `window_ps`.
    pub offset_bias_windows: f64,
}

impl Default for QkdConfig {
    fn default() -> Self {
        QkdConfig { settings: SettingsKind::Bbm92, intrinsic_error: 0.0, window_ps: 1_000, offset_bias_windows: 0.0 }
    }
}

/// Receive cycle for the pulsed pipeline. Window centres are cycle
/// positions in each agent's own readings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogicalConfig {
    pub center_a_ps: i64,
    pub center_b_ps: i64,
    /// Time-bin separation: early and late windows sit this far from the
    /// middle one.
    pub spacing_ps: i64,
    pub window_width_ps: i64,
    pub settle_cycles: u64,
    pub measure_arrivals: u64,
    pub phi_rad: f64,
    pub alpha_rad: f64,
    pub beta_rad: f64,
}

impl Default for LogicalConfig {
    fn default() -> Self {
        LogicalConfig {
            center_a_ps: 0,
            center_b_ps: 0,
            spacing_ps: 250_000,
            window_width_ps: 166_666,
            settle_cycles: 10_000,
            measure_arrivals: 100_000,
            phi_rad: 0.0,
            alpha_rad: 0.0,
            beta_rad: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub count: u32,
    pub interval_ps: i64,
    /// Read clocks without jitter or rounding.
    pub idealized: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { count: 100, interval_ps: 100_000_000, idealized: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    pub duration_ps: i64,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub channel: ChannelSet,
    #[serde(default)]
    pub clock: PerAgent<ClockParams>,
    #[serde(default)]
    pub detector: PerAgent<DetectorModel>,
    #[serde(default)]
    pub correlator: CorrelatorConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub qkd: QkdConfig,
    #[serde(default)]
    pub logical: LogicalConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| config_err("<document>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = table.try_into().map_err(|e: toml::de::Error| config_err("<document>", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text form; its hash identifies the run.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn duration(&self) -> SimDuration {
        SimDuration::from_ps(self.duration_ps)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.seed > i64::MAX as u64 {
            return Err(config_err("seed", "must fit in a signed 64-bit integer"));
        }
        if self.duration_ps <= 0 {
            return Err(config_err("duration_ps", "must be positive"));
        }
        match self.source {
            SourceConfig::Cw { rate_per_s } if !(rate_per_s > 0.0 && rate_per_s.is_finite()) => {
                return Err(config_err("source.rate_per_s", "must be positive"));
            }
            SourceConfig::Pulsed { period_ps, .. } if period_ps <= 0 => {
                return Err(config_err("source.period_ps", "must be positive"));
            }
            SourceConfig::Pulsed { efficiency, .. } if !(efficiency > 0.0 && efficiency <= 1.0) => {
                return Err(config_err("source.efficiency", "must be in (0, 1]"));
            }
            _ => {}
        }
        let end = SimInstant::ZERO + self.duration();
        for (name, ch) in [("sa", &self.channel.sa), ("sb", &self.channel.sb), ("ab", &self.channel.ab), ("ba", &self.channel.ba)] {
            if !(0.0..=1.0).contains(&ch.loss) {
                return Err(config_err(&format!("channel.{name}.loss"), "must be in [0, 1]"));
            }
            ch.validate(end).map_err(|e| config_err(&format!("channel.{name}.delay_ps"), e.to_string()))?;
        }
        for (name, c) in [("a", &self.clock.a), ("b", &self.clock.b)] {
            let rate = 1.0 + c.skew;
            if !(RATE_CLAMP.0..=RATE_CLAMP.1).contains(&rate) {
                return Err(config_err(&format!("clock.{name}.skew"), "rate outside the allowed range"));
            }
            if c.jitter_ps.is_nan() || c.jitter_ps < 0.0 {
                return Err(config_err(&format!("clock.{name}.jitter_ps"), "must be non-negative"));
            }
            if c.rw_sigma_per_sqrt_s.is_nan() || c.rw_sigma_per_sqrt_s < 0.0 {
                return Err(config_err(&format!("clock.{name}.rw_sigma_per_sqrt_s"), "must be non-negative"));
            }
        }
        for (name, d) in [("a", &self.detector.a), ("b", &self.detector.b)] {
            if d.dark_rate_per_s.is_nan() || d.dark_rate_per_s < 0.0 {
                return Err(config_err(&format!("detector.{name}.dark_rate_per_s"), "must be non-negative"));
            }
            if d.dead_time_ps < 0 {
                return Err(config_err(&format!("detector.{name}.dead_time_ps"), "must be non-negative"));
            }
            if d.channels == 0 {
                return Err(config_err(&format!("detector.{name}.channels"), "must be at least 1"));
            }
        }
        let c = &self.correlator;
        if c.coarse_bin_ps <= 0 || c.fine_bin_ps <= 0 {
            return Err(config_err("correlator.coarse_bin_ps", "bin widths must be positive"));
        }
        if c.tau_min_ps >= c.tau_max_ps {
            return Err(config_err("correlator.tau_min_ps", "must be below tau_max_ps"));
        }
        if c.significance.is_nan() || c.significance <= 0.0 {
            return Err(config_err("correlator.significance", "must be positive"));
        }
        if !(c.ambiguity_ratio > 0.0 && c.ambiguity_ratio <= 1.0) {
            return Err(config_err("correlator.ambiguity_ratio", "must be in (0, 1]"));
        }
        let k = &self.controller;
        for (name, g) in [("offset_gain", k.offset_gain), ("rate_gain", k.rate_gain), ("phase_gain", k.phase_gain)] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(config_err(&format!("controller.{name}"), "must be in (0, 1]"));
            }
        }
        if k.epoch_ps <= 0 {
            return Err(config_err("controller.epoch_ps", "must be positive"));
        }
        if k.avg_window == 0 {
            return Err(config_err("controller.avg_window", "must be at least 1"));
        }
        if !(0.0..=0.5).contains(&self.qkd.intrinsic_error) {
            return Err(config_err("qkd.intrinsic_error", "must be in [0, 0.5]"));
        }
        if self.qkd.window_ps <= 0 {
            return Err(config_err("qkd.window_ps", "must be positive"));
        }
        match self.experiment {
            Experiment::PulsedLogicalSync => {
                let SourceConfig::Pulsed { period_ps, .. } = self.source else {
                    return Err(config_err("source.kind", "pulsed_logical_sync needs a pulsed source"));
                };
                self.layouts(period_ps)?;
                let l = &self.logical;
                let w = l.window_width_ps / 2;
                if w <= 0 || 2 * w >= period_ps {
                    return Err(config_err("logical.window_width_ps", "must be positive and below the period"));
                }
                for (name, ch) in [("sa", &self.channel.sa), ("sb", &self.channel.sb)] {
                    if ch.delay_ps < l.spacing_ps as f64 {
                        return Err(config_err(&format!("channel.{name}.delay_ps"), "must be at least logical.spacing_ps"));
                    }
                }
            }
            Experiment::CwRateSteerQkd => {
                if self.duration_ps / k.epoch_ps < 1 {
                    return Err(config_err("controller.epoch_ps", "run must contain at least one epoch"));
                }
            }
            Experiment::BidirectionalSync => {
                if self.probes.count > 0 && self.probes.interval_ps <= 0 {
                    return Err(config_err("probes.interval_ps", "must be positive"));
                }
            }
            Experiment::CwOffsetQkd => {}
        }
        Ok(())
    }

    fn layouts(&self, period_ps: i64) -> Result<(WindowLayout, WindowLayout), ScenarioError> {
        let l = &self.logical;
        let mk = |c| WindowLayout::centred(period_ps, c, l.spacing_ps, l.window_width_ps);
        let a = mk(l.center_a_ps).map_err(|e| config_err("logical.spacing_ps", e.to_string()))?;
        let b = mk(l.center_b_ps).map_err(|e| config_err("logical.spacing_ps", e.to_string()))?;
        Ok((a, b))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub emit_histograms: bool,
}

/// One closed-loop epoch of the steered CW pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_hat_ps: Option<f64>,
    /// Bob's clock phase minus Alice's at the end of the epoch, after steering.
    pub true_offset_ps: f64,
    /// Bob's rate relative to Alice's, minus one, after steering.
    pub residual_skew: f64,
    pub nudge_ps: f64,
    pub rate_adjust: f64,
    pub converged: bool,
}

/// Run summary. Fields that do not apply to an experiment are omitted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub seed: u64,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub period_est_ps: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_estimate_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_uncertainty_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_truth_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_error_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delay_estimate_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_ab_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_ba_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_skew: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged_epoch: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_window_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measured_arrivals: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_counts_a: Option<[u64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase_counts_b: Option<[u64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub franson_probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_matched: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub qber: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key_bits: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub einstein_residual_aba_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub einstein_residual_bab_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub round_trip_ps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub einstein_bound_ps: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsReport {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    /// Relative path to file contents, including `manifest.toml`.
    pub files: BTreeMap<String, Vec<u8>>,
}

impl RunOutput {
    pub fn aborted(&self) -> bool {
        self.metrics.status == "aborted"
    }
}

/// Validates the config and runs its pipeline. Pipeline aborts (for
/// example an ambiguous correlation peak) are reported in the metrics
/// rather than as errors.
pub fn run_scenario(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput, ScenarioError> {
    cfg.validate()?;
    let mut ctx = Run::new(cfg, opts);
    let result = match cfg.experiment {
        Experiment::CwOffsetQkd => ctx.cw_offset_qkd(),
        Experiment::CwRateSteerQkd => ctx.cw_rate_steer_qkd(),
        Experiment::PulsedLogicalSync => ctx.pulsed_logical_sync(),
        Experiment::BidirectionalSync => ctx.bidirectional_sync(),
    };
    if let Err(abort) = result {
        ctx.metrics.status = "aborted".into();
        ctx.metrics.abort_reason = Some(abort.reason);
        ctx.metrics.period_est_ps = abort.period_est_ps;
    }
    Ok(ctx.finish())
}

/// Sorted file list with SHA-256 checksums, plus the config hash and seed.
pub fn manifest(cfg: &ScenarioConfig, files: &BTreeMap<String, Vec<u8>>) -> String {
    let mut s = String::new();
    writeln!(s, "config_sha256 = \"{}\"", sha256_hex(cfg.to_toml_string().as_bytes())).unwrap();
    writeln!(s, "seed = {}", cfg.seed).unwrap();
    s.push_str("\n[files]\n");
    for (name, bytes) in files {
        writeln!(s, "\"{}\" = \"{}\"", name, sha256_hex(bytes)).unwrap();
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
struct Abort {
    reason: String,
    period_est_ps: Option<i64>,
}

impl Abort {
    fn new(reason: impl Into<String>) -> Self {
        Abort { reason: reason.into(), period_est_ps: None }
    }
}

impl From<CorrelateError> for Abort {
    fn from(e: CorrelateError) -> Self {
        let period_est_ps = match e {
            CorrelateError::Ambiguous { period_est_ps } => Some(period_est_ps),
            _ => None,
        };
        Abort { reason: e.to_string(), period_est_ps }
    }
}

/// Independent random streams, one per physical process.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Source = 1,
    SourceB,
    ChannelA,
    ChannelB,
    ChannelAb,
    ChannelBa,
    DetectorA,
    DetectorB,
    ClockA,
    ClockB,
    SettingsA,
    SettingsB,
}

fn stream_rng(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s as u64);
    r
}

fn emit(source: &SourceConfig, duration: SimDuration, rng: &mut ChaCha8Rng) -> Result<Vec<PairEmission>, Abort> {
    let out = match *source {
        SourceConfig::Cw { rate_per_s } => generate_cw(rate_per_s, duration, rng),
        SourceConfig::Pulsed { period_ps, efficiency } => generate_pulsed(period_ps, efficiency, duration, rng),
    };
    out.map_err(|e| Abort::new(e.to_string()))
}

fn with_tags(mut arrivals: Vec<Arrival>, tags: &[PhotonTag]) -> Vec<Arrival> {
    for a in &mut arrivals {
        a.tag = tags[a.pair as usize];
    }
    arrivals
}

/// Polarization tags for both photons of each pair: random per-side
/// analyzer setting, outcomes from the singlet model.
fn polarization_tags(emissions: &[PairEmission], qkd: &QkdConfig, seed: u64) -> (Vec<PhotonTag>, Vec<PhotonTag>) {
    let settings = qkd.settings.analyzers();
    let mut ra = stream_rng(seed, Stream::SettingsA);
    let mut rb = stream_rng(seed, Stream::SettingsB);
    emissions
        .iter()
        .map(|e| {
            let basis_a = ra.random_range(0..settings.alice.len()) as u8;
            let basis_b = rb.random_range(0..settings.bob.len()) as u8;
            let (bit_a, bit_b) = sample_polarization_pair(
                settings.alice[basis_a as usize],
                settings.bob[basis_b as usize],
                qkd.intrinsic_error,
                e.hidden_seed,
            );
            (PhotonTag { channel: 0, basis: basis_a, bit: bit_a }, PhotonTag { channel: 0, basis: basis_b, bit: bit_b })
        })
        .unzip()
}

/// Mean `ideal_B - ideal_A` over pairs detected on both sides.
fn truth_offset(a: &[DetectionRecord], b: &[DetectionRecord]) -> Option<f64> {
    let ideal_a: HashMap<u64, f64> =
        a.iter().filter_map(|r| r.truth.and_then(|t| t.pair.map(|p| (p, t.ideal_ps)))).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for r in b {
        if let Some(t) = r.truth {
            if let Some(xa) = t.pair.and_then(|p| ideal_a.get(&p)) {
                sum += t.ideal_ps - xa;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn key_file(bits: &[u8]) -> Vec<u8> {
    let mut v: Vec<u8> = bits.iter().map(|b| b'0' + b).collect();
    v.push(b'\n');
    v
}

fn opt_csv(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

struct Run<'a> {
    cfg: &'a ScenarioConfig,
    opts: RunOptions,
    metrics: MetricsReport,
    files: BTreeMap<String, Vec<u8>>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ScenarioConfig, opts: RunOptions) -> Self {
        let metrics = MetricsReport {
            experiment: cfg.experiment.name().into(),
            seed: cfg.seed,
            status: "ok".into(),
            ..Default::default()
        };
        Run { cfg, opts, metrics, files: BTreeMap::new() }
    }

    fn finish(mut self) -> RunOutput {
        self.files.insert("metrics.toml".into(), self.metrics.to_toml_string().into_bytes());
        let m = manifest(self.cfg, &self.files);
        self.files.insert("manifest.toml".into(), m.into_bytes());
        RunOutput { metrics: self.metrics, files: self.files }
    }

    fn put(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.insert(name.to_string(), bytes);
    }

    fn put_records(&mut self, a: &[DetectionRecord], b: &[DetectionRecord]) {
        self.put("records_a.tsv", records::serialize(a).expect("sorted records"));
        self.put("records_b.tsv", records::serialize(b).expect("sorted records"));
    }

    fn put_histogram(&mut self, name: &str, h: &CorrelationHistogram) {
        if self.opts.emit_histograms {
            self.put(&format!("histograms/{name}.csv"), h.to_csv().into_bytes());
        }
    }

    fn coarse_histogram(&self, a: &[DetectionRecord], b: &[DetectionRecord]) -> Result<CorrelationHistogram, CorrelateError> {
        let c = &self.cfg.correlator;
        let w = c.coarse_bin_ps;
        let lo = c.tau_min_ps.div_euclid(w) * w;
        let hi = -((-c.tau_max_ps).div_euclid(w) * w);
        cross_correlate(&bin(a, w, None)?, &bin(b, w, None)?, lo, hi)
    }

    fn fine_histogram(&self, a: &[DetectionRecord], b: &[DetectionRecord], support: (i64, i64)) -> Result<CorrelationHistogram, CorrelateError> {
        let w = self.cfg.correlator.fine_bin_ps;
        let lo = support.0.div_euclid(w) * w;
        let hi = -((-support.1).div_euclid(w) * w);
        cross_correlate(&bin(a, w, None)?, &bin(b, w, None)?, lo, hi)
    }

    /// Sifting, QBER or CHSH, key files and the summary CSV.
    fn qkd_outputs(&mut self, pairs: &[SiftedPair]) {
        let matched_all = pairs.len() as u64;
        let mut q = None;
        let mut s = None;
        match self.cfg.qkd.settings {
            SettingsKind::Bbm92 => {
                if let Ok((rate, n)) = qber(pairs, BasisFilter::Matching) {
                    q = Some(rate);
                    self.metrics.matched = Some(n as u64);
                } else {
                    self.metrics.matched = Some(0);
                }
                let (ka, kb) = sifted_keys(pairs);
                self.metrics.key_bits = Some(ka.len() as u64);
                self.put("key_a.bits", key_file(&ka));
                self.put("key_b.bits", key_file(&kb));
            }
            SettingsKind::Chsh => {
                self.metrics.matched = Some(matched_all);
                s = chsh(pairs, &ChshSettings::default()).ok();
            }
        }
        self.metrics.qber = q;
        self.metrics.s_value = s;
        let summary = format!("matched,qber,s_value\n{},{},{}\n", self.metrics.matched.unwrap_or(0), opt_csv(q), opt_csv(s));
        self.put("qkd_summary.csv", summary.into_bytes());
    }

    /// Expected basis-matched coincidences: true pairs surviving both arms
    /// plus accidentals inside the window.
    fn coincidence_budget(&self, n_a: usize, n_b: usize) -> f64 {
        let cfg = self.cfg;
        let t_s = cfg.duration_ps as f64 * 1e-12;
        let true_pairs = cfg.source.mean_rate_per_s() * t_s * (1.0 - cfg.channel.sa.loss) * (1.0 - cfg.channel.sb.loss);
        let accidentals = n_a as f64 * n_b as f64 * (2 * cfg.qkd.window_ps + 1) as f64 / cfg.duration_ps as f64;
        let p_match = match cfg.qkd.settings {
            SettingsKind::Bbm92 => 0.5,
            SettingsKind::Chsh => 1.0,
        };
        (true_pairs + accidentals) * p_match
    }

    fn detector(&self, d: DetectorModel) -> DetectorModel {
        let n = self.cfg.qkd.settings.analyzers().alice.len() as u8;
        DetectorModel { bases: n, ..d }
    }

    fn cw_offset_qkd(&mut self) -> Result<(), Abort> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let span = cfg.duration();
        let emissions = emit(&cfg.source, span, &mut stream_rng(seed, Stream::Source))?;
        let (tags_a, tags_b) = polarization_tags(&emissions, &cfg.qkd, seed);
        let arr_a = with_tags(prop(&emissions, &cfg.channel.sa, seed, Stream::ChannelA)?, &tags_a);
        let arr_b = with_tags(prop(&emissions, &cfg.channel.sb, seed, Stream::ChannelB)?, &tags_b);
        let mut clock_a = ClockModel::new(cfg.clock.a);
        let mut clock_b = ClockModel::new(cfg.clock.b);
        let rec_a = detect(&arr_a, &self.detector(cfg.detector.a), AgentId::ALICE, &mut clock_a, None, span, &mut stream_rng(seed, Stream::DetectorA));
        let rec_b = detect(&arr_b, &self.detector(cfg.detector.b), AgentId::BOB, &mut clock_b, None, span, &mut stream_rng(seed, Stream::DetectorB));
        self.put_records(&rec_a, &rec_b);

        let truth = truth_offset(&rec_a, &rec_b);
        self.metrics.offset_truth_ps = truth;
        if self.opts.emit_histograms {
            let h = self.coarse_histogram(&rec_a, &rec_b)?;
            self.put_histogram("coarse", &h);
        }
        let m = measure_offset(&rec_a, &rec_b, &cfg.correlator)?;
        if self.opts.emit_histograms {
            let h = self.fine_histogram(&rec_a, &rec_b, m.fine.support_ps)?;
            self.put_histogram("fine", &h);
        }
        let tau = m.fine.tau_ps;
        self.metrics.offset_estimate_ps = Some(tau);
        self.metrics.offset_uncertainty_ps = Some(m.fine.uncertainty_ps);
        self.metrics.offset_error_ps = truth.map(|t| tau - t);

        let sift_offset = tau + cfg.qkd.offset_bias_windows * cfg.qkd.window_ps as f64;
        let pairs = sift(&rec_a, &rec_b, sift_offset, cfg.qkd.window_ps as f64);
        self.qkd_outputs(&pairs);
        if matches!(cfg.source, SourceConfig::Cw { .. }) {
            self.metrics.expected_matched = Some(self.coincidence_budget(rec_a.len(), rec_b.len()));
        }
        Ok(())
    }

    fn cw_rate_steer_qkd(&mut self) -> Result<(), Abort> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let k = &cfg.controller;
        let n_epochs = (cfg.duration_ps / k.epoch_ps) as u32;
        let span = SimDuration::from_ps(n_epochs as i64 * k.epoch_ps);
        let emissions = emit(&cfg.source, span, &mut stream_rng(seed, Stream::Source))?;
        let (tags_a, tags_b) = polarization_tags(&emissions, &cfg.qkd, seed);
        let arr_a = with_tags(prop(&emissions, &cfg.channel.sa, seed, Stream::ChannelA)?, &tags_a);
        let arr_b = with_tags(prop(&emissions, &cfg.channel.sb, seed, Stream::ChannelB)?, &tags_b);
        let fires_a = detector_fires(&arr_a, &self.detector(cfg.detector.a), span, &mut stream_rng(seed, Stream::DetectorA));
        let fires_b = detector_fires(&arr_b, &self.detector(cfg.detector.b), span, &mut stream_rng(seed, Stream::DetectorB));

        #[derive(Clone, Copy)]
        enum Ev {
            FireA(usize),
            FireB(usize),
            Epoch(u32),
        }
        let mut sched = Scheduler::new();
        let horizon = SimInstant::ZERO + span;
        for (i, f) in fires_a.iter().enumerate().filter(|(_, f)| f.truth_time < horizon) {
            sched.schedule(f.truth_time, Ev::FireA(i)).expect("future event");
        }
        for (i, f) in fires_b.iter().enumerate().filter(|(_, f)| f.truth_time < horizon) {
            sched.schedule(f.truth_time, Ev::FireB(i)).expect("future event");
        }
        for e in 1..=n_epochs {
            sched.schedule(SimInstant::from_ps(e as i64 * k.epoch_ps), Ev::Epoch(e)).expect("future event");
        }

        enum Controller {
            Offset(OffsetLoopState),
            Rate(RateLoopState),
        }
        let mut ctl = match k.mode {
            LoopMode::Offset => Controller::Offset(OffsetLoopState::new(k.offset_gain).map_err(|e| Abort::new(e.to_string()))?),
            LoopMode::OffsetRate => Controller::Rate(
                RateLoopState::new(k.offset_gain, k.rate_gain, k.convergence).map_err(|e| Abort::new(e.to_string()))?,
            ),
        };
        let mut clock_a = ClockModel::new(cfg.clock.a);
        let mut clock_b = ClockModel::new(cfg.clock.b);
        let mut rng_a = stream_rng(seed, Stream::ClockA);
        let mut rng_b = stream_rng(seed, Stream::ClockB);
        let (mut ep_a, mut ep_b) = (Vec::new(), Vec::new());
        let (mut all_a, mut all_b) = (Vec::new(), Vec::new());
        let mut pairs = Vec::new();
        let mut log = Vec::new();
        let mut epochs = Vec::new();
        let mut histograms = Vec::new();
        let mut abort: Option<Abort> = None;
        let mut converged_epoch = None;

        sched.run_all(|s, ev| {
            if abort.is_some() {
                return;
            }
            match ev.kind {
                Ev::FireA(i) => ep_a.extend(stamp(&fires_a[i], AgentId::ALICE, &mut clock_a, None, &mut rng_a)),
                Ev::FireB(i) => ep_b.extend(stamp(&fires_b[i], AgentId::BOB, &mut clock_b, None, &mut rng_b)),
                Ev::Epoch(e) => {
                    sort_by_reading(&mut ep_a);
                    sort_by_reading(&mut ep_b);
                    let mut row = EpochMetrics {
                        epoch: e,
                        status: "ok".into(),
                        tau_hat_ps: None,
                        true_offset_ps: 0.0,
                        residual_skew: 0.0,
                        nudge_ps: 0.0,
                        rate_adjust: 0.0,
                        converged: false,
                    };
                    match measure_offset(&ep_a, &ep_b, &cfg.correlator) {
                        Ok(m) => {
                            let tau = m.fine.tau_ps;
                            row.tau_hat_ps = Some(tau);
                            histograms.push((e, m.histogram));
                            pairs.extend(sift(&ep_a, &ep_b, tau, cfg.qkd.window_ps as f64));
                            let mid_s = match (ep_a.first(), ep_a.last()) {
                                (Some(f), Some(l)) => (f.ps() as f64 + l.ps() as f64) / 2.0 * 1e-12,
                                _ => 0.0,
                            };
                            let cmd = match &mut ctl {
                                Controller::Offset(st) => Ok(st.step(tau)),
                                Controller::Rate(st) => st.step(tau, mid_s),
                            };
                            match cmd {
                                Ok(cmd) => {
                                    clock_b.advance_to(s.now(), &mut rng_b);
                                    if let Err(err) = clock_b.apply_steer(&cmd) {
                                        abort = Some(Abort::new(err.to_string()));
                                        return;
                                    }
                                    row.nudge_ps = cmd.offset_nudge_ps;
                                    row.rate_adjust = cmd.rate_adjust;
                                    log.push(SteeringLogEntry { epoch: e as u64, agent: AgentId::BOB, command: cmd });
                                }
                                Err(err) => {
                                    abort = Some(Abort::new(err.to_string()));
                                    return;
                                }
                            }
                        }
                        Err(CorrelateError::NoPeak) => row.status = "no_peak".into(),
                        Err(err) => {
                            abort = Some(err.into());
                            return;
                        }
                    }
                    if let Controller::Rate(st) = &ctl {
                        row.converged = st.converged;
                        if st.converged && converged_epoch.is_none() {
                            converged_epoch = Some(e);
                        }
                    }
                    clock_a.advance_to(s.now(), &mut rng_a);
                    clock_b.advance_to(s.now(), &mut rng_b);
                    row.true_offset_ps = clock_b.ideal_phase_ps(s.now()) - clock_a.ideal_phase_ps(s.now());
                    row.residual_skew = clock_b.rate() / clock_a.rate() - 1.0;
                    epochs.push(row);
                    all_a.append(&mut ep_a);
                    all_b.append(&mut ep_b);
                }
            }
        });

        sort_by_reading(&mut all_a);
        sort_by_reading(&mut all_b);
        self.put_records(&all_a, &all_b);
        self.put("steering.csv", steering_csv(&log).into_bytes());
        for (e, h) in &histograms {
            self.put_histogram(&format!("epoch_{e:03}"), h);
        }
        if let Some(last) = epochs.last() {
            self.metrics.residual_skew = Some(last.residual_skew);
            self.metrics.offset_error_ps = Some(last.true_offset_ps);
            self.metrics.offset_estimate_ps = last.tau_hat_ps;
        }
        self.metrics.converged_epoch = converged_epoch;
        self.metrics.epochs = epochs;
        if let Some(a) = abort {
            return Err(a);
        }
        pairs.sort_by_key(|p| (p.reading_a, p.reading_b));
        self.qkd_outputs(&pairs);
        Ok(())
    }

    fn pulsed_logical_sync(&mut self) -> Result<(), Abort> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let l = &cfg.logical;
        let SourceConfig::Pulsed { period_ps, .. } = cfg.source else {
            unreachable!("validated");
        };
        let (layout_a, layout_b) = cfg.layouts(period_ps).expect("validated");
        let span = cfg.duration();
        let emissions = emit(&cfg.source, span, &mut stream_rng(seed, Stream::Source))?;
        let state = PulsedPairState { phi: l.phi_rad, alpha: l.alpha_rad, beta: l.beta_rad };
        self.metrics.franson_probability = Some(franson_coincidence_probability(&state));

        let outcomes: Vec<_> = emissions.iter().map(|e| sample_time_bin_pair(&state, e.hidden_seed)).collect();
        let shift = |arr: Vec<Arrival>, side_a: bool| -> Vec<Arrival> {
            let mut v: Vec<Arrival> = arr
                .into_iter()
                .map(|mut a| {
                    let o = outcomes[a.pair as usize];
                    let (slot, port) = if side_a { (o.slot_a, o.port_a) } else { (o.slot_b, o.port_b) };
                    let d = (slot.index() as i64 - 1) * l.spacing_ps;
                    a.truth_time = a.truth_time + SimDuration::from_ps(d);
                    a.tag = PhotonTag { channel: port, basis: 0, bit: port };
                    a
                })
                .collect();
            v.sort_by_key(|a| a.truth_time);
            v
        };
        let arr_a = shift(prop(&emissions, &cfg.channel.sa, seed, Stream::ChannelA)?, true);
        let arr_b = shift(prop(&emissions, &cfg.channel.sb, seed, Stream::ChannelB)?, false);
        let det = |d: DetectorModel| DetectorModel { channels: d.channels.max(2), ..d };

        let mut clock_a = ClockModel::new(cfg.clock.a);
        let rec_a = detect(&arr_a, &det(cfg.detector.a), AgentId::ALICE, &mut clock_a, Some(layout_a.cycle()), span, &mut stream_rng(seed, Stream::DetectorA));

        // Bob steers on every click; only in-window clicks are recorded.
        let fires_b = detector_fires(&arr_b, &det(cfg.detector.b), span, &mut stream_rng(seed, Stream::DetectorB));
        let mut sched = Scheduler::new();
        for (i, f) in fires_b.iter().enumerate() {
            sched.schedule(f.truth_time, i).expect("future event");
        }
        let mut clock_b = ClockModel::new(cfg.clock.b);
        let mut rng_b = stream_rng(seed, Stream::ClockB);
        let k = &cfg.controller;
        let mut phase = PhaseLoopState::new(period_ps, l.center_b_ps, l.window_width_ps / 2, k.avg_window, k.phase_gain, k.phase_damping)
            .map_err(|e| Abort::new(e.to_string()))?
            .with_slots(vec![-l.spacing_ps, 0, l.spacing_ps]);
        let settle = SimInstant::from_ps(period_ps.saturating_mul(l.settle_cycles as i64));
        let mut rec_b = Vec::new();
        let mut log = Vec::new();
        let (mut measured, mut inside) = (0u64, 0u64);
        let mut updates = 0u64;
        let mut abort = None;
        sched.run_all(|_, ev| {
            if abort.is_some() {
                return;
            }
            let f = &fires_b[ev.kind];
            let Some(r) = stamp(f, AgentId::BOB, &mut clock_b, None, &mut rng_b) else {
                return;
            };
            let (class, cmd) = phase.step(r.ps());
            if f.truth_time >= settle && r.is_signal() && measured < l.measure_arrivals {
                measured += 1;
                inside += (class == WindowClass::InWindow) as u64;
            }
            if layout_b.cycle().contains(r.ps()) {
                rec_b.push(r);
            }
            if !cmd.is_noop() {
                updates += 1;
                if let Err(e) = clock_b.apply_steer(&cmd) {
                    abort = Some(Abort::new(e.to_string()));
                    return;
                }
                log.push(SteeringLogEntry { epoch: updates, agent: AgentId::BOB, command: cmd });
            }
        });
        sort_by_reading(&mut rec_b);
        self.put_records(&rec_a, &rec_b);
        self.put("steering.csv", steering_csv(&log).into_bytes());
        let counts = |recs: &[DetectionRecord], layout: &WindowLayout| {
            let mut c = [0u64; 3];
            for r in recs {
                if let Some(p) = classify_phase(r.ps(), layout) {
                    c[p.index()] += 1;
                }
            }
            c
        };
        self.metrics.phase_counts_a = Some(counts(&rec_a, &layout_a));
        self.metrics.phase_counts_b = Some(counts(&rec_b, &layout_b));
        self.metrics.measured_arrivals = Some(measured);
        self.metrics.in_window_fraction = (measured > 0).then(|| inside as f64 / measured as f64);
        let mut csv = String::from("phase,count_a,count_b\n");
        for p in PhaseClass::ALL {
            let name = match p {
                PhaseClass::Early => "early",
                PhaseClass::Middle => "middle",
                PhaseClass::Late => "late",
            };
            writeln!(csv, "{name},{},{}", self.metrics.phase_counts_a.unwrap()[p.index()], self.metrics.phase_counts_b.unwrap()[p.index()]).unwrap();
        }
        self.put("phase_counts.csv", csv.into_bytes());
        abort.map_or(Ok(()), Err)
    }

    fn bidirectional_sync(&mut self) -> Result<(), Abort> {
        let cfg = self.cfg;
        let seed = cfg.seed;
        let span = cfg.duration();
        let em_a = emit(&cfg.source, span, &mut stream_rng(seed, Stream::Source))?;
        let em_b = emit(&cfg.source, span, &mut stream_rng(seed, Stream::SourceB))?;
        let local = ChannelModel::default();
        let on = |mut v: Vec<Arrival>, channel: u8| {
            for a in &mut v {
                a.tag = PhotonTag { channel, basis: 0, bit: 0 };
            }
            v
        };
        // Channel 0 sees the agent's own source, channel 1 the far one.
        let merge = |mut x: Vec<Arrival>, y: Vec<Arrival>| {
            x.extend(y);
            x.sort_by_key(|a| a.truth_time);
            x
        };
        let arr_a = merge(
            on(prop(&em_a, &local, seed, Stream::ChannelA)?, 0),
            on(prop(&em_b, &cfg.channel.ba, seed, Stream::ChannelBa)?, 1),
        );
        let arr_b = merge(
            on(prop(&em_b, &local, seed, Stream::ChannelB)?, 0),
            on(prop(&em_a, &cfg.channel.ab, seed, Stream::ChannelAb)?, 1),
        );
        let det = |d: DetectorModel| DetectorModel { channels: d.channels.max(2), ..d };
        let mut clock_a = ClockModel::new(cfg.clock.a);
        let mut clock_b = ClockModel::new(cfg.clock.b);
        let mut rng_a = stream_rng(seed, Stream::ClockA);
        let mut rng_b = stream_rng(seed, Stream::ClockB);
        let rec_a = detect(&arr_a, &det(cfg.detector.a), AgentId::ALICE, &mut clock_a, None, span, &mut stream_rng(seed, Stream::DetectorA));
        let rec_b = detect(&arr_b, &det(cfg.detector.b), AgentId::BOB, &mut clock_b, None, span, &mut stream_rng(seed, Stream::DetectorB));
        self.put_records(&rec_a, &rec_b);

        let (a0, a1) = (on_channel(&rec_a, 0), on_channel(&rec_a, 1));
        let (b0, b1) = (on_channel(&rec_b, 0), on_channel(&rec_b, 1));
        let m_ab = measure_offset(&a0, &b1, &cfg.correlator)?;
        let m_ba = measure_offset(&a1, &b0, &cfg.correlator)?;
        self.put_histogram("tau_ab", &m_ab.histogram);
        self.put_histogram("tau_ba", &m_ba.histogram);
        let sample = BidirectionalSample { tau_ab_ps: m_ab.fine.tau_ps, tau_ba_ps: m_ba.fine.tau_ps };
        let (theta, d) = bidirectional_solve(&sample).map_err(|e| Abort::new(e.to_string()))?;
        self.metrics.tau_ab_ps = Some(sample.tau_ab_ps);
        self.metrics.tau_ba_ps = Some(sample.tau_ba_ps);
        self.metrics.offset_estimate_ps = Some(theta);
        self.metrics.delay_estimate_ps = Some(d);
        let mid = SimInstant::ZERO + SimDuration::from_fs(span.as_fs() / 2);
        let truth = clock_b.ideal_phase_ps(mid) - clock_a.ideal_phase_ps(mid);
        self.metrics.offset_truth_ps = Some(truth);
        self.metrics.offset_error_ps = Some(theta - truth);

        let end = SimInstant::ZERO + span;
        clock_a.advance_to(end.max(clock_a.last_evolved()), &mut rng_a);
        clock_b.advance_to(end.max(clock_b.last_evolved()), &mut rng_b);
        let cmd = SteeringCommand::nudge(-theta);
        clock_b.apply_steer(&cmd).map_err(|e| Abort::new(e.to_string()))?;
        self.put("steering.csv", steering_csv(&[SteeringLogEntry { epoch: 1, agent: AgentId::BOB, command: cmd }]).into_bytes());

        self.einstein_probes(clock_a, clock_b, rng_a, rng_b)
    }

    /// Echo probes in both directions after the one-shot steer.
    fn einstein_probes(&mut self, mut clock_a: ClockModel, mut clock_b: ClockModel, mut rng_a: ChaCha8Rng, mut rng_b: ChaCha8Rng) -> Result<(), Abort> {
        let cfg = self.cfg;
        let p = &cfg.probes;
        if p.count == 0 {
            return Ok(());
        }
        #[derive(Clone, Copy)]
        enum Hop {
            Send,
            Echo,
            Return,
        }
        #[derive(Clone, Copy)]
        struct Ev {
            probe: usize,
            from_a: bool,
            hop: Hop,
        }
        let start = clock_a.last_evolved().max(clock_b.last_evolved());
        let mut sched = Scheduler::new();
        let mut readings = vec![[0.0f64; 3]; 2 * p.count as usize];
        for i in 0..p.count as usize {
            let t = start + SimDuration::from_ps(p.interval_ps * (i as i64 + 1));
            sched.schedule(t, Ev { probe: 2 * i, from_a: true, hop: Hop::Send }).expect("future event");
            let t2 = t + SimDuration::from_ps(p.interval_ps / 2);
            sched.schedule(t2, Ev { probe: 2 * i + 1, from_a: false, hop: Hop::Send }).expect("future event");
        }
        let ch = cfg.channel;
        sched.run_all(|s, ev| {
            let ev = ev.kind;
            let now = s.now();
            // Which clock reads this hop, and which path carries it onward.
            let on_a = matches!((ev.from_a, ev.hop), (true, Hop::Send) | (true, Hop::Return) | (false, Hop::Echo));
            let reading = match (on_a, p.idealized) {
                (true, true) => clock_a.ideal_phase_ps(now),
                (false, true) => clock_b.ideal_phase_ps(now),
                (true, false) => clock_a.reading_at(now, &mut rng_a).ps() as f64,
                (false, false) => clock_b.reading_at(now, &mut rng_b).ps() as f64,
            };
            let (idx, next) = match ev.hop {
                Hop::Send => (0, Some(Hop::Echo)),
                Hop::Echo => (1, Some(Hop::Return)),
                Hop::Return => (2, None),
            };
            readings[ev.probe][idx] = reading;
            if let Some(hop) = next {
                let path = if on_a { ch.ab } else { ch.ba };
                s.schedule(now + path.delay_at(now), Ev { hop, ..ev }).expect("future event");
            }
        });

        let mut csv = String::from("direction,t_send_ps,t_echo_ps,t_return_ps,residual_ps\n");
        let (mut sum_aba, mut sum_bab, mut sum_rtt) = (0.0, 0.0, 0.0);
        for (k, r) in readings.iter().enumerate() {
            let probe = EinsteinProbe { t_a: r[0], t_b: r[1], t_a_prime: r[2] };
            let res = einstein_residual(&probe);
            let dir = if k % 2 == 0 { "ABA" } else { "BAB" };
            if k % 2 == 0 {
                sum_aba += res;
            } else {
                sum_bab += res;
            }
            sum_rtt += probe.round_trip();
            writeln!(csv, "{dir},{},{},{},{}", r[0], r[1], r[2], res).unwrap();
        }
        let n = p.count as f64;
        let rtt = sum_rtt / (2.0 * n);
        let v = (ch.ab.ramp_ps_per_s + ch.ba.ramp_ps_per_s) / 2.0 * 1e-12;
        self.metrics.einstein_residual_aba_ps = Some(sum_aba / n);
        self.metrics.einstein_residual_bab_ps = Some(sum_bab / n);
        self.metrics.round_trip_ps = Some(rtt);
        self.metrics.einstein_bound_ps = Some(v.abs() * rtt / 4.0);
        self.put("probes.csv", csv.into_bytes());
        Ok(())
    }
}

fn prop(emissions: &[PairEmission], ch: &ChannelModel, seed: u64, s: Stream) -> Result<Vec<Arrival>, Abort> {
    propagate(emissions, ch, &mut stream_rng(seed, s)).map_err(|e| Abort::new(e.to_string()))
}
