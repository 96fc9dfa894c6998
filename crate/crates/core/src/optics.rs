//! Pair sources, propagation channels, and detectors.

use rand::Rng;
use rand_distr::{Distribution, Exp, Geometric};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clocks::ClockModel;
use crate::engine::{SimDuration, SimInstant, FS_PER_PS, FS_PER_S};
use crate::records::{sort_by_reading, AgentId, DetectionRecord, Origin, TruthTag};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("channel delay becomes negative ({delay_ps} ps at {at_s} s)")]
    NegativeDelay { delay_ps: f64, at_s: f64 },
    #[error("gating windows overlap or leave the cycle")]
    OverlappingWindows,
    #[error("invalid source parameter: {0}")]
    InvalidSource(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairEmission {
    /// Emission index, unique within one source.
    pub id: u64,
    pub truth_time: SimInstant,
    /// Slot number for pulsed sources.
    pub pulse_index: Option<u64>,
    /// Seeds outcome sampling for both photons of the pair.
    pub hidden_seed: u64,
}

/// Homogeneous Poisson pair emission over `[0, duration)`.
pub fn generate_cw<R: Rng + ?Sized>(
    rate_per_s: f64,
    duration: SimDuration,
    rng: &mut R,
) -> Result<Vec<PairEmission>, OpticsError> {
    if !(rate_per_s > 0.0 && rate_per_s.is_finite()) {
        return Err(OpticsError::InvalidSource("rate must be positive"));
    }
    let gaps = Exp::new(rate_per_s).expect("positive rate");
    let end = duration.as_fs();
    let mut out = Vec::with_capacity((rate_per_s * duration.as_secs_f64() * 1.05) as usize + 8);
    let mut t: i64 = 0;
    loop {
        let gap_s: f64 = gaps.sample(rng);
        t += (gap_s * FS_PER_S as f64).round() as i64;
        if t >= end {
            break;
        }
        let id = out.len() as u64;
        out.push(PairEmission {
            id,
            truth_time: SimInstant::from_fs(t),
            pulse_index: None,
            hidden_seed: rng.random(),
        });
    }
    Ok(out)
}

/// Slot `k` (at `k * period`) emits a pair with probability `efficiency`.
pub fn generate_pulsed<R: Rng + ?Sized>(
    period_ps: i64,
    efficiency: f64,
    duration: SimDuration,
    rng: &mut R,
) -> Result<Vec<PairEmission>, OpticsError> {
    if period_ps <= 0 {
        return Err(OpticsError::InvalidSource("period must be positive"));
    }
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(OpticsError::InvalidSource("efficiency must be in (0, 1]"));
    }
    let period_fs = period_ps * FS_PER_PS;
    let slots = (duration.as_fs() + period_fs - 1) / period_fs;
    // Skip runs of empty slots instead of drawing one Bernoulli per slot.
    let skip = Geometric::new(efficiency).expect("valid probability");
    let mut out = Vec::new();
    let mut k: u64 = skip.sample(rng);
    while (k as i64) < slots {
        let id = out.len() as u64;
        out.push(PairEmission {
            id,
            truth_time: SimInstant::from_fs(k as i64 * period_fs),
            pulse_index: Some(k),
            hidden_seed: rng.random(),
        });
        k = k.saturating_add(1 + skip.sample(rng));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModel {
    #[serde(default)]
    pub delay_ps: f64,
    /// Delay change per second of ground truth; models relative motion.
    #[serde(default)]
    pub ramp_ps_per_s: f64,
    #[serde(default)]
    pub loss: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel { delay_ps: 0.0, ramp_ps_per_s: 0.0, loss: 0.0 }
    }
}

impl ChannelModel {
    pub fn fixed(delay_ps: f64) -> Self {
        ChannelModel { delay_ps, ..Default::default() }
    }

    pub fn delay_ps_at(&self, t: SimInstant) -> f64 {
        self.delay_ps + self.ramp_ps_per_s * t.as_secs_f64()
    }

    pub fn delay_at(&self, t: SimInstant) -> SimDuration {
        SimDuration::from_fs((self.delay_ps_at(t) * FS_PER_PS as f64).round() as i64)
    }

    /// Checks `d(t) >= 0` on `[0, until]`; the delay is linear so the
    /// endpoints suffice.
    pub fn validate(&self, until: SimInstant) -> Result<(), OpticsError> {
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(OpticsError::InvalidSource("loss must be in [0, 1]"));
        }
        for t in [SimInstant::ZERO, until] {
            let d = self.delay_ps_at(t);
            if d < 0.0 {
                return Err(OpticsError::NegativeDelay { delay_ps: d, at_s: t.as_secs_f64() });
            }
        }
        Ok(())
    }
}

/// Outcome labels attached to a photon before it reaches a detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PhotonTag {
    pub channel: u8,
    pub basis: u8,
    pub bit: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub truth_time: SimInstant,
    pub pair: u64,
    pub pulse_index: Option<u64>,
    pub hidden_seed: u64,
    pub tag: PhotonTag,
}

/// Applies loss and delay. Survivors are returned sorted by arrival time.
pub fn propagate<R: Rng + ?Sized>(
    emissions: &[PairEmission],
    channel: &ChannelModel,
    rng: &mut R,
) -> Result<Vec<Arrival>, OpticsError> {
    let last = emissions.iter().map(|e| e.truth_time).max().unwrap_or(SimInstant::ZERO);
    channel.validate(last)?;
    let mut out = Vec::with_capacity(((1.0 - channel.loss) * emissions.len() as f64) as usize + 8);
    for e in emissions {
        if channel.loss > 0.0 && rng.random::<f64>() < channel.loss {
            continue;
        }
        out.push(Arrival {
            truth_time: e.truth_time + channel.delay_at(e.truth_time),
            pair: e.id,
            pulse_index: e.pulse_index,
            hidden_seed: e.hidden_seed,
            tag: PhotonTag::default(),
        });
    }
    out.sort_by_key(|a| a.truth_time);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    #[serde(default)]
    pub dark_rate_per_s: f64,
    #[serde(default)]
    pub dead_time_ps: i64,
    #[serde(default = "one")]
    pub channels: u8,
    #[serde(default = "one")]
    pub bases: u8,
}

fn one() -> u8 {
    1
}

impl Default for DetectorModel {
    fn default() -> Self {
        DetectorModel { dark_rate_per_s: 0.0, dead_time_ps: 0, channels: 1, bases: 1 }
    }
}

/// A detector click in ground truth, before timestamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorFire {
    pub truth_time: SimInstant,
    pub tag: PhotonTag,
    pub origin: Origin,
    pub pair: Option<u64>,
    pub pulse_index: Option<u64>,
}

/// Periodic acceptance windows in local clock readings.
///
/// A reading falls in window `i` when `(reading - origin) mod period`
/// lies in `[windows[i].0, windows[i].1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleWindows {
    pub period_ps: i64,
    pub origin_ps: i64,
    windows: Vec<(i64, i64)>,
}

impl CycleWindows {
    pub fn new(period_ps: i64, origin_ps: i64, mut windows: Vec<(i64, i64)>) -> Result<Self, OpticsError> {
        if period_ps <= 0 {
            return Err(OpticsError::OverlappingWindows);
        }
        let order: Vec<(i64, i64)> = {
            let mut w = windows.clone();
            w.sort();
            w
        };
        let inside = order.iter().all(|&(s, e)| 0 <= s && s < e && e <= period_ps);
        let disjoint = order.windows(2).all(|p| p[0].1 <= p[1].0);
        if !inside || !disjoint {
            return Err(OpticsError::OverlappingWindows);
        }
        windows.shrink_to_fit();
        Ok(CycleWindows { period_ps, origin_ps, windows })
    }

    pub fn windows(&self) -> &[(i64, i64)] {
        &self.windows
    }

    pub fn position_in_cycle(&self, reading_ps: i64) -> i64 {
        (reading_ps - self.origin_ps).rem_euclid(self.period_ps)
    }

    pub fn locate(&self, reading_ps: i64) -> Option<usize> {
        let pos = self.position_in_cycle(reading_ps);
        self.windows.iter().position(|&(s, e)| s <= pos && pos < e)
    }

    pub fn contains(&self, reading_ps: i64) -> bool {
        self.locate(reading_ps).is_some()
    }

    /// Fraction of the cycle covered by windows.
    pub fn duty_cycle(&self) -> f64 {
        let open: i64 = self.windows.iter().map(|(s, e)| e - s).sum();
        open as f64 / self.period_ps as f64
    }
}

/// Merges arrivals with dark counts over `[0, span)` and applies
/// per-channel non-paralyzable dead time in ground truth.
pub fn detector_fires<R: Rng + ?Sized>(
    arrivals: &[Arrival],
    det: &DetectorModel,
    span: SimDuration,
    rng: &mut R,
) -> Vec<DetectorFire> {
    let mut fires: Vec<DetectorFire> = arrivals
        .iter()
        .map(|a| DetectorFire {
            truth_time: a.truth_time,
            tag: a.tag,
            origin: Origin::Signal,
            pair: Some(a.pair),
            pulse_index: a.pulse_index,
        })
        .collect();
    if det.dark_rate_per_s > 0.0 && span.as_fs() > 0 {
        let gaps = Exp::new(det.dark_rate_per_s).expect("positive rate");
        let mut t: i64 = 0;
        loop {
            let gap_s: f64 = gaps.sample(rng);
            t += (gap_s * FS_PER_S as f64).round() as i64;
            if t >= span.as_fs() {
                break;
            }
            let tag = PhotonTag {
                channel: rng.random_range(0..det.channels.max(1)),
                basis: rng.random_range(0..det.bases.max(1)),
                bit: rng.random_range(0..2),
            };
            fires.push(DetectorFire {
                truth_time: SimInstant::from_fs(t),
                tag,
                origin: Origin::Dark,
                pair: None,
                pulse_index: None,
            });
        }
    }
    fires.sort_by_key(|f| f.truth_time);
    if det.dead_time_ps > 0 {
        let dead = det.dead_time_ps * FS_PER_PS;
        let mut last: Vec<Option<i64>> = vec![None; 256];
        fires.retain(|f| {
            let slot = &mut last[f.tag.channel as usize];
            match *slot {
                Some(prev) if f.truth_time.as_fs() - prev < dead => false,
                _ => {
                    *slot = Some(f.truth_time.as_fs());
                    true
                }
            }
        });
    }
    fires
}

/// Timestamps one click with the agent's clock. Returns `None` when gated away.
pub fn stamp<R: Rng + ?Sized>(
    fire: &DetectorFire,
    agent: AgentId,
    clock: &mut ClockModel,
    gating: Option<&CycleWindows>,
    rng: &mut R,
) -> Option<DetectionRecord> {
    let reading = clock.reading_at(fire.truth_time, rng);
    if gating.is_some_and(|g| !g.contains(reading.ps())) {
        return None;
    }
    Some(DetectionRecord {
        agent,
        reading,
        channel: fire.tag.channel,
        basis: fire.tag.basis,
        bit: fire.tag.bit,
        truth: Some(TruthTag {
            origin: fire.origin,
            pair: fire.pair,
            ideal_ps: clock.ideal_phase_ps(fire.truth_time),
        }),
    })
}

/// Full detection chain for an open-loop run: dark counts, dead time,
/// optional gating, timestamping, then sort by reading.
pub fn detect<R: Rng + ?Sized>(
    arrivals: &[Arrival],
    det: &DetectorModel,
    agent: AgentId,
    clock: &mut ClockModel,
    gating: Option<&CycleWindows>,
    span: SimDuration,
    rng: &mut R,
) -> Vec<DetectionRecord> {
    let fires = detector_fires(arrivals, det, span, rng);
    let mut out: Vec<DetectionRecord> = fires
        .iter()
        .filter_map(|f| stamp(f, agent, clock, gating, rng))
        .collect();
    sort_by_reading(&mut out);
    out
}
