//! Simulation and protocol library for synchronizing two clocks from the
//! arrival times of entangled photon pairs.

pub mod clocks;
pub mod correlate;
pub mod engine;
pub mod optics;
pub mod qkd;
pub mod records;
pub mod scenario;
pub mod steer;

pub use clocks::{ClockModel, ClockParams, ClockReading, SteeringCommand};
pub use correlate::{CorrelationHistogram, CorrelatorConfig, OffsetEstimate};
pub use engine::{Scheduler, SimDuration, SimInstant};
pub use records::{AgentId, DetectionRecord};
pub use scenario::{run_scenario, Experiment, MetricsReport, RunOptions, RunOutput, ScenarioConfig, ScenarioError};
