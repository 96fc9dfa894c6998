//! Steerable local clocks.
//!
//! A clock integrates its rate over ground-truth time. Its error model is
//! initial offset, constant skew, a random walk on the rate, and white
//! jitter added to each reading (never to the internal phase).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{SimInstant, FS_PER_PS, FS_PER_S};

/// Rates outside this band (relative to nominal 1.0) are rejected.
pub const RATE_CLAMP: (f64, f64) = (0.5, 2.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClockError {
    #[error("steering would move the rate to {rate}, outside [{lo}, {hi}] of nominal", lo = RATE_CLAMP.0, hi = RATE_CLAMP.1)]
    ClampViolation { rate: f64 },
}

/// A local clock reading in integer picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct ClockReading(pub i64);

impl ClockReading {
    pub fn ps(self) -> i64 {
        self.0
    }
}

/// The "faster-slower lever": an offset step and a fractional rate change.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SteeringCommand {
    pub offset_nudge_ps: f64,
    pub rate_adjust: f64,
}

impl SteeringCommand {
    pub fn nudge(ps: f64) -> Self {
        SteeringCommand { offset_nudge_ps: ps, rate_adjust: 0.0 }
    }

    pub fn rate(adjust: f64) -> Self {
        SteeringCommand { offset_nudge_ps: 0.0, rate_adjust: adjust }
    }

    pub fn is_noop(&self) -> bool {
        self.offset_nudge_ps == 0.0 && self.rate_adjust == 0.0
    }
}

/// Static clock parameters as they appear in scenario configs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockParams {
    /// Initial reading minus ground truth.
    #[serde(default)]
    pub offset_ps: i64,
    /// Fractional rate error, e.g. 1e-5 for 10 ppm.
    #[serde(default)]
    pub skew: f64,
    /// Rate random-walk diffusion per square-root second.
    #[serde(default)]
    pub rw_sigma_per_sqrt_s: f64,
    /// Standard deviation of the white reading jitter.
    #[serde(default)]
    pub jitter_ps: f64,
}

impl ClockParams {
    pub fn ideal() -> Self {
        ClockParams::default()
    }
}

#[derive(Debug, Clone)]
pub struct ClockModel {
    params: ClockParams,
    anchor: SimInstant,
    phase_ps: f64,
    rate: f64,
}

impl ClockModel {
    pub fn new(params: ClockParams) -> Self {
        ClockModel {
            params,
            anchor: SimInstant::ZERO,
            phase_ps: params.offset_ps as f64,
            rate: 1.0 + params.skew,
        }
    }

    pub fn params(&self) -> &ClockParams {
        &self.params
    }

    /// Current rate relative to ground truth (1.0 is a perfect clock).
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn last_evolved(&self) -> SimInstant {
        self.anchor
    }

    /// Integrates the clock forward to `t`, stepping the rate random walk.
    ///
    /// Panics if `t` precedes the last evolution step.
    pub fn advance_to<R: Rng + ?Sized>(&mut self, t: SimInstant, rng: &mut R) {
        assert!(
            t >= self.anchor,
            "clock evolved backwards: {} < {}",
            t,
            self.anchor
        );
        let dt_fs = (t - self.anchor).as_fs();
        if dt_fs == 0 {
            return;
        }
        self.phase_ps += self.rate * (dt_fs as f64 / FS_PER_PS as f64);
        if self.params.rw_sigma_per_sqrt_s > 0.0 {
            let dt_s = dt_fs as f64 / FS_PER_S as f64;
            let z: f64 = rng.sample(StandardNormal);
            self.rate += self.params.rw_sigma_per_sqrt_s * dt_s.sqrt() * z;
            self.rate = self.rate.clamp(RATE_CLAMP.0, RATE_CLAMP.1);
        }
        self.anchor = t;
    }

    /// Jitter-free phase at `t`, extrapolated with the current rate and
    /// without touching the random-walk state. Oracle use only.
    pub fn ideal_phase_ps(&self, t: SimInstant) -> f64 {
        let dt_fs = t.as_fs() - self.anchor.as_fs();
        self.phase_ps + self.rate * (dt_fs as f64 / FS_PER_PS as f64)
    }

    /// Reads the clock at ground-truth instant `t`.
    pub fn reading_at<R: Rng + ?Sized>(&mut self, t: SimInstant, rng: &mut R) -> ClockReading {
        self.advance_to(t, rng);
        let mut value = self.phase_ps;
        if self.params.jitter_ps > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            value += self.params.jitter_ps * z;
        }
        ClockReading(value.round() as i64)
    }

    /// Applies a steering command at the clock's last evolution instant.
    pub fn apply_steer(&mut self, cmd: &SteeringCommand) -> Result<(), ClockError> {
        let rate = self.rate * (1.0 + cmd.rate_adjust);
        if !(RATE_CLAMP.0..=RATE_CLAMP.1).contains(&rate) || !rate.is_finite() {
            return Err(ClockError::ClampViolation { rate });
        }
        self.rate = rate;
        self.phase_ps += cmd.offset_nudge_ps;
        Ok(())
    }
}
