//! Acceptance criteria 1 to 10. One PASS/FAIL line each; non-zero exit if any fail.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pairsync::qkd::{chsh, franson_coincidence_probability, sample_polarization_pair, AnalyzerSettings, ChshSettings, PulsedPairState, SiftedPair};
use pairsync::scenario::LoopMode;
use pairsync::{run_scenario, MetricsReport, RunOptions, ScenarioConfig};
use tempfile::TempDir;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

fn load(name: &str) -> ScenarioConfig {
    let text = fs::read_to_string(scenario_path(name)).expect("scenario file");
    ScenarioConfig::from_toml_str(&text).expect("scenario parses")
}

fn run(cfg: &ScenarioConfig) -> Result<MetricsReport, String> {
    run_scenario(cfg, RunOptions::default()).map(|o| o.metrics).map_err(|e| e.to_string())
}

struct CliRun {
    code: i32,
    dir: TempDir,
    elapsed: Duration,
}

fn cli(name: &str, extra: &[&str]) -> CliRun {
    let dir = TempDir::new().expect("tempdir");
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_pairsync"))
        .arg("run")
        .arg(scenario_path(name))
        .arg("--out")
        .arg(dir.path())
        .args(extra)
        .status()
        .expect("spawn pairsync");
    CliRun { code: status.code().unwrap_or(-1), dir, elapsed: start.elapsed() }
}

fn cli_metrics(r: &CliRun) -> Result<MetricsReport, String> {
    let text = fs::read_to_string(r.dir.path().join("metrics.toml")).map_err(|e| e.to_string())?;
    toml::from_str(&text).map_err(|e| e.to_string())
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Verdict {
    let r = cli("offset_recovery", &[]);
    let m = cli_metrics(&r)?;
    let truth = 12_345_000.0;
    let est = m.offset_estimate_ps.ok_or("no estimate")?;
    let secs = r.elapsed.as_secs_f64();
    check(r.code == 0 && (est - truth).abs() <= 100.0 && secs < 30.0, format!("exit {}, tau_hat {est:.1} ps vs {truth}, {secs:.2} s", r.code))
}

fn criterion_2() -> Verdict {
    let r = cli("periodic_source", &[]);
    let m = cli_metrics(&r)?;
    let detail = format!(
        "exit {}, status {}, period_est {:?}, estimate {:?}",
        r.code, m.status, m.period_est_ps, m.offset_estimate_ps
    );
    let period_ok = m.period_est_ps.is_some_and(|p| (p - 10_000).abs() <= 1_000);
    check(r.code == 3 && period_ok, detail)
}

fn criterion_3() -> Verdict {
    let mut cfg = load("rate_steer");
    let coarse = cfg.correlator.coarse_bin_ps as f64;
    let rate = run(&cfg)?;
    cfg.controller.mode = LoopMode::Offset;
    let offset_only = run(&cfg)?;
    let grew = offset_only.epochs.iter().take(10).find(|e| e.tau_hat_ps.is_none_or(|t| t.abs() > coarse));
    let last = rate.epochs.get(19).or(rate.epochs.last()).ok_or("no epochs")?;
    let ok = grew.is_some() && rate.epochs.len() <= 20 && last.residual_skew.abs() < 1e-7 && last.true_offset_ps.abs() < 100.0;
    check(
        ok,
        format!(
            "offset-only exceeds {coarse} ps at epoch {:?}; offset+rate epoch {}: skew {:.2e}, offset {:.1} ps",
            grew.map(|e| e.epoch),
            last.epoch,
            last.residual_skew,
            last.true_offset_ps
        ),
    )
}

fn logical(name: &str) -> Result<(bool, String), String> {
    let cfg = load(name);
    let m = run(&cfg)?;
    let frac = m.in_window_fraction.ok_or("no in-window fraction")?;
    let n = m.measured_arrivals.unwrap_or(0);
    let ok = frac >= 0.99 && n == 100_000 && cfg.logical.settle_cycles <= 10_000;
    Ok((ok, format!("{name}: in-window {frac:.5} over {n} arrivals after {} cycles", cfg.logical.settle_cycles)))
}

fn criterion_4() -> Verdict {
    let (ok, detail) = logical("logical_sync")?;
    check(ok, detail)
}

fn criterion_5() -> Verdict {
    let mut cfg = load("bidirectional_noiseless");
    let sym = run(&cfg)?;
    let (theta, d) = (sym.offset_estimate_ps.ok_or("no offset")?, sym.delay_estimate_ps.ok_or("no delay")?);
    cfg.channel.ba.delay_ps += 1_000.0;
    let asym = run(&cfg)?;
    let bias = asym.offset_estimate_ps.ok_or("no offset")? - 2_000.0;
    check(
        theta == 2_000.0 && d == 5_000.0 && (bias + 500.0).abs() <= 100.0,
        format!("theta {theta}, d {d}; with 1 ns asymmetry bias {bias:.2} ps"),
    )
}

fn criterion_6() -> Verdict {
    let st = run(&load("einstein_static"))?;
    let jitter = 50.0;
    let (sa, sb) = (st.einstein_residual_aba_ps.ok_or("no residual")?, st.einstein_residual_bab_ps.ok_or("no residual")?);
    let static_ok = sa.abs() < 3.0 * jitter && sb.abs() < 3.0 * jitter;

    let cfg = load("einstein_moving");
    let mv = run(&cfg)?;
    let v = cfg.channel.ab.ramp_ps_per_s * 1e-12;
    let rtt = cfg.channel.ab.delay_ps + cfg.channel.ba.delay_ps;
    let bound = v.abs() * rtt / 4.0;
    let (ma, mb) = (mv.einstein_residual_aba_ps.ok_or("no residual")?, mv.einstein_residual_bab_ps.ok_or("no residual")?);
    let moving_ok = !(ma.abs() < bound && mb.abs() < bound);
    let (logical_ok, logical_detail) = logical("logical_sync_moving")?;
    check(
        static_ok && moving_ok && logical_ok,
        format!("static residuals {sa:.2}/{sb:.2} ps; moving {ma:.3}/{mb:.3} ps vs bound {bound:.4} ps; {logical_detail}"),
    )
}

fn criterion_7() -> Verdict {
    let r = cli("qkd_sync", &[]);
    let m = cli_metrics(&r)?;
    let cfg = load("qkd_sync");
    let lines = |f: &str| fs::read_to_string(r.dir.path().join(f)).map(|s| s.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).count() as f64);
    let (na, nb) = (lines("records_a.tsv").map_err(|e| e.to_string())?, lines("records_b.tsv").map_err(|e| e.to_string())?);
    let t = cfg.duration_ps as f64 * 1e-12;
    let (ea, eb) = (1.0 - cfg.channel.sa.loss, 1.0 - cfg.channel.sb.loss);
    let window = cfg.qkd.window_ps as f64 * 1e-12;
    let budget = (cfg.source.mean_rate_per_s() * t * ea * eb + na * nb * (2.0 * window) / t) * 0.5;
    let matched = m.matched.ok_or("no matched count")? as f64;
    let qber = m.qber.ok_or("no qber")?;

    let mut biased = cfg.clone();
    biased.qkd.offset_bias_windows = 10.0;
    let bq = run(&biased)?.qber.ok_or("no qber")?;
    check(
        r.code == 0 && (qber - 0.02).abs() <= 0.01 && (matched / budget - 1.0).abs() <= 0.2 && (bq - 0.5).abs() <= 0.05,
        format!("qber {qber:.4}, matched {matched} vs budget {budget:.0}; biased qber {bq:.4}"),
    )
}

fn criterion_8() -> Verdict {
    let s = AnalyzerSettings::chsh();
    let pairs: Vec<SiftedPair> = (0..100_000u64)
        .map(|k| {
            let (ia, ib) = ((k & 1) as u8, ((k >> 1) & 1) as u8);
            let (x, y) = sample_polarization_pair(s.alice[ia as usize], s.bob[ib as usize], 0.0, 0xC45E_0000 + k);
            SiftedPair { reading_a: k as i64, reading_b: k as i64, basis_a: ia, basis_b: ib, bit_a: x, bit_b: y }
        })
        .collect();
    let quantum = chsh(&pairs, &ChshSettings::default()).map_err(|e| e.to_string())?;

    let mut classical: f64 = f64::NEG_INFINITY;
    for strategy in 0u8..16 {
        let out = |i: u8| (strategy >> i) & 1;
        let det: Vec<SiftedPair> = (0..4u8)
            .map(|k| {
                let (ia, ib) = (k & 1, k >> 1);
                SiftedPair { reading_a: 0, reading_b: 0, basis_a: ia, basis_b: ib, bit_a: out(ia), bit_b: out(2 + ib) }
            })
            .collect();
        classical = classical.max(chsh(&det, &ChshSettings::default()).map_err(|e| e.to_string())?);
    }
    check(
        (quantum - 2.0 * SQRT_2).abs() <= 0.05 && classical <= 2.0 + 1e-12,
        format!("S = {quantum:.4} (target {:.4}); best deterministic S = {classical}", 2.0 * SQRT_2),
    )
}

fn criterion_9() -> Verdict {
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let phi = 2.0 * PI * i as f64 / 100.0 - PI;
        let (alpha, beta) = (0.3 + 0.01 * i as f64, -0.7 + 0.02 * i as f64);
        let p = franson_coincidence_probability(&PulsedPairState { phi, alpha, beta });
        let closed = ((phi - alpha - beta) / 2.0).cos().powi(2);
        // |(e^{i(α+β)} + e^{iφ}) / 2|²
        let (re, im) = ((alpha + beta).cos() + phi.cos(), (alpha + beta).sin() + phi.sin());
        let direct = (re * re + im * im) / 4.0;
        worst = worst.max((p - closed).abs()).max((p - direct).abs());
    }
    check(worst <= 1e-12, format!("max deviation {worst:.2e} over 100 phases"))
}

fn dir_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("read_dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).expect("prefix").to_path_buf(), fs::read(&p).expect("read"));
            }
        }
    }
    out
}

fn criterion_10() -> Verdict {
    let names = ["offset_recovery", "periodic_source", "rate_steer", "logical_sync", "bidirectional_noiseless", "einstein_moving", "qkd_sync"];
    let mut total = 0;
    for name in names {
        let (x, y) = (cli(name, &["--emit-histograms"]), cli(name, &["--emit-histograms"]));
        let (fx, fy) = (dir_bytes(x.dir.path()), dir_bytes(y.dir.path()));
        if x.code != y.code || fx.is_empty() || fx != fy {
            return Err(format!("{name}: outputs differ (exit {} vs {})", x.code, y.code));
        }
        total += fx.len();
    }
    Ok(format!("{} scenarios, {total} files byte-identical across runs", names.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("offset recovery", criterion_1),
        ("periodicity failure", criterion_2),
        ("rate steering", criterion_3),
        ("logical synchronization", criterion_4),
        ("bidirectional algebra", criterion_5),
        ("echo criterion under motion", criterion_6),
        ("QKD payoff", criterion_7),
        ("CHSH", criterion_8),
        ("Franson law", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(d) => println!("criterion {} {name}: PASS: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {} {name}: FAIL: {d}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
