//! Fixtures shared by the benchmarks.

use pairsync::records::{AgentId, DetectionRecord};
use pairsync::{ScenarioConfig, SimDuration};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two record streams over `span_ps`: `pairs` coincidences with Bob read
/// `offset_ps` late, plus `darks` uncorrelated clicks per side.
pub fn correlated_streams(pairs: usize, darks: usize, span_ps: i64, offset_ps: i64, seed: u64) -> (Vec<DetectionRecord>, Vec<DetectionRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::with_capacity(pairs + darks);
    let mut b = Vec::with_capacity(pairs + darks);
    for _ in 0..pairs {
        let t = rng.random_range(0..span_ps);
        a.push(t);
        b.push(t + offset_ps + rng.random_range(-50..=50));
    }
    for _ in 0..darks {
        a.push(rng.random_range(0..span_ps));
        b.push(rng.random_range(0..span_ps) + offset_ps);
    }
    a.sort_unstable();
    b.sort_unstable();
    let rec = |agent, v: Vec<i64>| v.into_iter().map(|p| DetectionRecord::new(agent, p, 0, 0, 0)).collect();
    (rec(AgentId::ALICE, a), rec(AgentId::BOB, b))
}

/// A small offset-recovery scenario lasting `duration`.
pub fn small_offset_scenario(duration: SimDuration) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::from_toml_str(
        r#"
experiment = "cw_offset_qkd"
seed = 1
duration_ps = 1_000_000_000

[source]
kind = "cw"
rate_per_s = 1.0e5

[channel.sa]
delay_ps = 1_000_000.0
loss = 0.5

[channel.sb]
delay_ps = 1_000_000.0
loss = 0.5

[clock.b]
offset_ps = 250_000
jitter_ps = 50.0

[detector.a]
dark_rate_per_s = 1.0e3

[detector.b]
dark_rate_per_s = 1.0e3
"#,
    )
    .expect("fixture parses");
    cfg.duration_ps = duration.as_fs() / 1_000;
    cfg
}
