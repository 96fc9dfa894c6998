//! Feedback controllers that turn measured offsets into steering commands,
//! plus the two-way (bidirectional) offset solution and the echo-residual
//! check.
//!
//! Sign convention: `tau = reading_B - reading_A` for the same pair, so a
//! positive offset means Bob reads late and is nudged earlier. Alice is the
//! reference; only Bob's clock is steered.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clocks::SteeringCommand;
use crate::records::AgentId;

const HISTORY_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SteerError {
    #[error("epoch midpoint did not advance")]
    ZeroEpochSpan,
    #[error("solved one-way delay is negative ({0} ps)")]
    NegativeDelay(f64),
    #[error("gain {0} outside (0, 1]")]
    BadGain(f64),
}

fn check_gain(g: f64) -> Result<f64, SteerError> {
    if g > 0.0 && g <= 1.0 {
        Ok(g)
    } else {
        Err(SteerError::BadGain(g))
    }
}

/// Offset-only loop: each epoch nudges Bob by a fraction of the offset.
#[derive(Debug, Clone)]
pub struct OffsetLoopState {
    gain: f64,
    pub running_offset: f64,
    pub history: VecDeque<f64>,
}

impl OffsetLoopState {
    pub fn new(gain: f64) -> Result<Self, SteerError> {
        Ok(OffsetLoopState { gain: check_gain(gain)?, running_offset: 0.0, history: VecDeque::new() })
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn step(&mut self, tau_hat_ps: f64) -> SteeringCommand {
        self.running_offset = (1.0 - self.gain) * self.running_offset + self.gain * tau_hat_ps;
        if self.history.len() == HISTORY_LEN {
            self.history.pop_front();
        }
        self.history.push_back(tau_hat_ps);
        SteeringCommand::nudge(-self.gain * tau_hat_ps)
    }
}

/// Convergence thresholds for [`RateLoopState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub max_offset_ps: f64,
    pub max_slope: f64,
    pub consecutive: u32,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence { max_offset_ps: 100.0, max_slope: 1e-7, consecutive: 3 }
    }
}

/// Offset plus relative-frequency loop.
///
/// The rate term differentiates successive offsets against the offset
/// expected right after the previous nudge, so the nudges themselves do
/// not register as drift.
#[derive(Debug, Clone)]
pub struct RateLoopState {
    offset_gain: f64,
    rate_gain: f64,
    /// Offset expected immediately after the last nudge.
    last_tau: Option<f64>,
    last_epoch_mid: f64,
    last_slope: Option<f64>,
    criterion: Convergence,
    streak: u32,
    pub converged: bool,
}

impl RateLoopState {
    pub fn new(offset_gain: f64, rate_gain: f64, criterion: Convergence) -> Result<Self, SteerError> {
        Ok(RateLoopState {
            offset_gain: check_gain(offset_gain)?,
            rate_gain: check_gain(rate_gain)?,
            last_tau: None,
            last_epoch_mid: 0.0,
            last_slope: None,
            criterion,
            streak: 0,
            converged: false,
        })
    }

    pub fn last_slope(&self) -> Option<f64> {
        self.last_slope
    }

    /// `epoch_mid_s` is the epoch midpoint in Alice-reading seconds.
    pub fn step(&mut self, tau_hat_ps: f64, epoch_mid_s: f64) -> Result<SteeringCommand, SteerError> {
        let nudge = -self.offset_gain * tau_hat_ps;
        let mut rate_adjust = 0.0;
        let mut slope = None;
        if let Some(last) = self.last_tau {
            let span_s = epoch_mid_s - self.last_epoch_mid;
            if span_s == 0.0 {
                return Err(SteerError::ZeroEpochSpan);
            }
            let s = (tau_hat_ps - last) / (span_s * 1e12);
            rate_adjust = -self.rate_gain * s;
            slope = Some(s);
        }
        self.last_tau = Some(tau_hat_ps + nudge);
        self.last_epoch_mid = epoch_mid_s;
        self.last_slope = slope;

        let c = &self.criterion;
        let ok = tau_hat_ps.abs() < c.max_offset_ps && slope.is_some_and(|s| s.abs() < c.max_slope);
        self.streak = if ok { self.streak + 1 } else { 0 };
        self.converged = self.streak >= c.consecutive;
        Ok(SteeringCommand { offset_nudge_ps: nudge, rate_adjust })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowClass {
    InWindow,
    OutOfWindow,
}

/// Keeps arrivals of a cyclic source centred in a receive window by
/// steering the clock rate from averaged phase deviations.
///
/// The rate correction spreads the averaged deviation over the span since
/// the previous update, and a damping term on the change between successive
/// averages cancels the rate error that produced it.
#[derive(Debug, Clone)]
pub struct PhaseLoopState {
    pub period: i64,
    pub phase_center: i64,
    pub window_halfwidth: i64,
    avg_window: usize,
    gain: f64,
    damping: f64,
    /// Offsets of the sub-slots relative to `phase_center`; each arrival is
    /// measured from the nearest one.
    slots: Vec<i64>,
    deviations: Vec<f64>,
    prev_mean: Option<f64>,
    last_update: Option<i64>,
}

impl PhaseLoopState {
    pub fn new(period: i64, phase_center: i64, window_halfwidth: i64, avg_window: usize, gain: f64, damping: f64) -> Result<Self, SteerError> {
        assert!(period > 0 && window_halfwidth > 0 && 2 * window_halfwidth < period, "window must fit in half a period");
        assert!(avg_window >= 1, "averaging window must hold at least one deviation");
        if !(gain > 0.0 && gain <= 1.0) {
            return Err(SteerError::BadGain(gain));
        }
        Ok(PhaseLoopState {
            period,
            phase_center,
            window_halfwidth,
            avg_window,
            gain,
            damping: damping.max(0.0),
            slots: vec![0],
            deviations: Vec::with_capacity(avg_window),
            prev_mean: None,
            last_update: None,
        })
    }

    pub fn with_slots(mut self, slots: Vec<i64>) -> Self {
        assert!(!slots.is_empty());
        self.slots = slots;
        self
    }

    /// Deviation from the nearest slot centre, wrapped to `(-period/2, period/2]`.
    pub fn deviation(&self, reading: i64) -> i64 {
        self.slots
            .iter()
            .map(|s| wrap(reading - self.phase_center - s, self.period))
            .min_by_key(|d| d.abs())
            .expect("at least one slot")
    }

    pub fn classify(&self, reading: i64) -> WindowClass {
        if self.deviation(reading).abs() <= self.window_halfwidth {
            WindowClass::InWindow
        } else {
            WindowClass::OutOfWindow
        }
    }

    pub fn step(&mut self, arrival_reading: i64) -> (WindowClass, SteeringCommand) {
        let delta = self.deviation(arrival_reading);
        let class = self.classify(arrival_reading);
        if self.last_update.is_none() && self.deviations.is_empty() {
            self.last_update = Some(arrival_reading);
        }
        self.deviations.push(delta as f64);
        let mut cmd = SteeringCommand::default();
        if self.deviations.len() >= self.avg_window {
            let mean = self.deviations.iter().sum::<f64>() / self.deviations.len() as f64;
            let elapsed = (arrival_reading - self.last_update.unwrap_or(arrival_reading)) as f64;
            if elapsed > 0.0 {
                let change = self.prev_mean.map_or(0.0, |p| mean - p);
                cmd.rate_adjust = -(self.gain * mean + self.damping * change) / elapsed;
            }
            self.deviations.clear();
            self.prev_mean = Some(mean);
            self.last_update = Some(arrival_reading);
        }
        (class, cmd)
    }
}

/// `x mod period` mapped into `(-period/2, period/2]`.
pub fn wrap(x: i64, period: i64) -> i64 {
    let r = x.rem_euclid(period);
    if 2 * r > period {
        r - period
    } else {
        r
    }
}

/// Two directed offsets: `tau_ab = t_R_B - t_X_A` and `tau_ba` defined by
/// `t_R_A - t_X_B = -tau_ba`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidirectionalSample {
    pub tau_ab_ps: f64,
    pub tau_ba_ps: f64,
}

/// Clock offset (Bob minus Alice) and one-way delay, assuming equal delays
/// in both directions.
pub fn bidirectional_solve(s: &BidirectionalSample) -> Result<(f64, f64), SteerError> {
    let offset = (s.tau_ab_ps + s.tau_ba_ps) / 2.0;
    let delay = (s.tau_ab_ps - s.tau_ba_ps) / 2.0;
    if delay < 0.0 {
        return Err(SteerError::NegativeDelay(delay));
    }
    Ok((offset, delay))
}

/// An echoed signal: sent at `t_a`, echoed at `t_b` on the other clock,
/// back at `t_a_prime`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EinsteinProbe {
    pub t_a: f64,
    pub t_b: f64,
    pub t_a_prime: f64,
}

impl EinsteinProbe {
    pub fn round_trip(&self) -> f64 {
        self.t_a_prime - self.t_a
    }
}

/// `t_b - (t_a + t_a') / 2`; zero when the echo criterion holds.
pub fn einstein_residual(p: &EinsteinProbe) -> f64 {
    debug_assert!(p.t_a_prime >= p.t_a);
    p.t_b - (p.t_a + p.t_a_prime) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringLogEntry {
    pub epoch: u64,
    pub agent: AgentId,
    pub command: SteeringCommand,
}

/// `epoch,agent,nudge_ps,rate_adjust` with a header row.
pub fn steering_csv(entries: &[SteeringLogEntry]) -> String {
    let mut s = String::from("epoch,agent,nudge_ps,rate_adjust\n");
    for e in entries {
        writeln!(s, "{},{},{},{:e}", e.epoch, e.agent, e.command.offset_nudge_ps, e.command.rate_adjust).expect("write to String");
    }
    s
}
