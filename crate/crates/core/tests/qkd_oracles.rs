//! QKD layer against brute-force and analytic oracles.

use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_4, FRAC_PI_8, PI, SQRT_2};

use pairsync::qkd::{
    chsh, correlator, franson_coincidence_probability, qber, sample_polarization_pair, sample_time_bin_pair, sift,
    AnalyzerSettings, BasisFilter, ChshSettings, PhaseClass, PulsedPairState, SiftedPair,
};
use pairsync::records::{AgentId, DetectionRecord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_stream(r: &mut ChaCha8Rng, agent: AgentId, n: usize, span: i64) -> Vec<DetectionRecord> {
    let mut v: Vec<i64> = (0..n).map(|_| r.random_range(0..span)).collect();
    v.sort_unstable();
    v.into_iter()
        .map(|p| DetectionRecord::new(agent, p, 0, r.random_range(0..2), r.random_range(0..2)))
        .collect()
}

/// All admissible pairs, closest first (then earlier, then later endpoint),
/// taken whenever both records are still free.
fn brute_force_sift(a: &[DetectionRecord], b: &[DetectionRecord], offset: f64, window: f64) -> Vec<SiftedPair> {
    let mut all = Vec::new();
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            let (u, v) = (x.ps() as f64, y.ps() as f64 - offset);
            if (v - u).abs() <= window {
                all.push(((v - u).abs(), u.min(v), u.max(v), i, j));
            }
        }
    }
    all.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)).then(p.2.total_cmp(&q.2)).then(p.3.cmp(&q.3)).then(p.4.cmp(&q.4)));
    let (mut ua, mut ub) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, _, _, i, j) in all {
        if !ua[i] && !ub[j] {
            ua[i] = true;
            ub[j] = true;
            let (x, y) = (&a[i], &b[j]);
            out.push(SiftedPair { reading_a: x.ps(), reading_b: y.ps(), basis_a: x.basis, basis_b: y.basis, bit_a: x.bit, bit_b: y.bit });
        }
    }
    out.sort_by_key(|p| (p.reading_a, p.reading_b));
    out
}

#[test]
fn sift_matches_brute_force() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let a = random_stream(&mut r, AgentId::ALICE, 1_000, 2_000_000);
        let b = random_stream(&mut r, AgentId::BOB, 1_000, 2_000_000);
        let offset = r.random_range(-5_000.0..5_000.0);
        let fast = sift(&a, &b, offset, 700.0);
        let slow = brute_force_sift(&a, &b, offset, 700.0);
        assert_eq!(fast.len(), slow.len(), "seed {seed}");
        assert_eq!(qber(&fast, BasisFilter::Matching), qber(&slow, BasisFilter::Matching));
        assert_eq!(fast, slow, "seed {seed}");
    }
}

fn pair_set(p: &[SiftedPair], swapped: bool) -> BTreeSet<(i64, i64)> {
    p.iter().map(|x| if swapped { (x.reading_b, x.reading_a) } else { (x.reading_a, x.reading_b) }).collect()
}

proptest! {
    #[test]
    fn sift_is_symmetric(seed in any::<u64>(), quarter_offset in -40_000i64..40_000, window in 1i64..2_000) {
        let mut r = rng(seed);
        let a = random_stream(&mut r, AgentId::ALICE, 200, 200_000);
        let b = random_stream(&mut r, AgentId::BOB, 200, 200_000);
        let theta = quarter_offset as f64 / 4.0;
        let ab = sift(&a, &b, theta, window as f64);
        let ba = sift(&b, &a, -theta, window as f64);
        prop_assert_eq!(pair_set(&ab, false), pair_set(&ba, true));
    }

    #[test]
    fn franson_depends_on_phase_combination_only(phi in -10.0f64..10.0, alpha in -10.0f64..10.0, beta in -10.0f64..10.0, k in -3i32..3, shift in -5.0f64..5.0) {
        let base = franson_coincidence_probability(&PulsedPairState { phi, alpha, beta });
        let moved = franson_coincidence_probability(&PulsedPairState { phi: phi + shift + 2.0 * PI * k as f64, alpha: alpha + shift, beta });
        prop_assert!((base - moved).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
    }
}

fn sampled_correlator(a: f64, b: f64, e: f64, n: u64, seed0: u64) -> (f64, f64) {
    let mut sum = 0.0;
    for s in 0..n {
        let (x, y) = sample_polarization_pair(a, b, e, seed0 + s);
        sum += if x == y { 1.0 } else { -1.0 };
    }
    let m = sum / n as f64;
    (m, ((1.0 - m * m) / n as f64).sqrt())
}

#[test]
fn correlator_matches_singlet_model() {
    let (e, sd) = sampled_correlator(0.0, FRAC_PI_8, 0.0, 100_000, 0);
    assert!((e + FRAC_PI_4.cos()).abs() < 3.0 * sd, "E = {e}");
    let (e, sd) = sampled_correlator(0.3, 0.3 + FRAC_PI_4, 0.0, 100_000, 1 << 32);
    assert!(e.abs() < 3.0 * sd, "E = {e}");
}

#[test]
fn intrinsic_error_gives_expected_qber() {
    let e = 0.01;
    let n = 200_000u64;
    let errors = (0..n).filter(|&s| {
        let (x, y) = sample_polarization_pair(0.0, 0.0, e, s);
        x == y
    });
    let q = errors.count() as f64 / n as f64;
    let expect = 2.0 * e * (1.0 - e);
    assert!((q - expect).abs() < 4.0 * (expect / n as f64).sqrt(), "qber {q}");
}

fn chsh_pairs(n: u64, e: f64, seed: u64) -> Vec<SiftedPair> {
    let s = AnalyzerSettings::chsh();
    let mut r = rng(seed);
    (0..n)
        .map(|k| {
            let (ia, ib) = (r.random_range(0..2u8), r.random_range(0..2u8));
            let (x, y) = sample_polarization_pair(s.alice[ia as usize], s.bob[ib as usize], e, seed.wrapping_mul(1_000_003) + k);
            SiftedPair { reading_a: k as i64, reading_b: k as i64, basis_a: ia, basis_b: ib, bit_a: x, bit_b: y }
        })
        .collect()
}

#[test]
fn chsh_reaches_quantum_bound() {
    let s = chsh(&chsh_pairs(100_000, 0.0, 7), &ChshSettings::default()).unwrap();
    assert!((s - 2.0 * SQRT_2).abs() < 0.05, "S = {s}");
}

#[test]
fn randomized_bits_give_no_violation() {
    let s = chsh(&chsh_pairs(100_000, 0.5, 8), &ChshSettings::default()).unwrap();
    assert!(s < 0.05, "S = {s}");
}

#[test]
fn deterministic_strategies_respect_classical_bound() {
    let mut r = rng(9);
    let mut best: f64 = 0.0;
    for strategy in 0u8..16 {
        let out = |bit: u8| (strategy >> bit) & 1;
        let pairs: Vec<SiftedPair> = (0..4_000)
            .map(|k| {
                let (ia, ib) = (r.random_range(0..2u8), r.random_range(0..2u8));
                SiftedPair { reading_a: k, reading_b: k, basis_a: ia, basis_b: ib, bit_a: out(ia), bit_b: out(2 + ib) }
            })
            .collect();
        let s = chsh(&pairs, &ChshSettings::default()).unwrap();
        best = best.max(s);
        assert!(s <= 2.0 + 1e-12, "strategy {strategy}: S = {s}");
    }
    assert!((best - 2.0).abs() < 1e-12);
}

#[test]
fn correlator_per_setting_is_counted_separately() {
    let pairs = chsh_pairs(20_000, 0.0, 10);
    let e = correlator(&pairs, 0, 1).unwrap();
    let expect = -(2.0 * (0.0 - 3.0 * FRAC_PI_8)).cos();
    assert!((e - expect).abs() < 0.05, "{e} vs {expect}");
}

#[test]
fn franson_grid_matches_closed_form_and_amplitudes() {
    for i in 0..100 {
        let phi = -PI + 2.0 * PI * i as f64 / 99.0;
        let (alpha, beta) = (0.37 * i as f64, -0.11 * i as f64);
        let p = franson_coincidence_probability(&PulsedPairState { phi, alpha, beta });
        let closed = ((phi - alpha - beta) / 2.0).cos().powi(2);
        let re = (alpha + beta).cos() + phi.cos();
        let im = (alpha + beta).sin() + phi.sin();
        let direct = (re * re + im * im) / 4.0;
        assert!((p - closed).abs() < 1e-12, "phi {phi}");
        assert!((p - direct).abs() < 1e-12, "phi {phi}");
    }
}

#[test]
fn time_bin_joint_slots_and_interference() {
    let st = PulsedPairState { phi: PI / 2.0, alpha: FRAC_PI_4, beta: 0.0 };
    let n = 200_000u64;
    let mut joint = [[0u64; 3]; 3];
    let (mut mm, mut mm_same) = (0u64, 0u64);
    for s in 0..n {
        let o = sample_time_bin_pair(&st, s);
        joint[o.slot_a.index()][o.slot_b.index()] += 1;
        if o.slot_a == PhaseClass::Middle && o.slot_b == PhaseClass::Middle {
            mm += 1;
            mm_same += (o.port_a == o.port_b) as u64;
        }
    }
    let p = |c: u64| c as f64 / n as f64;
    let tol = |q: f64| 4.0 * (q * (1.0 - q) / n as f64).sqrt();
    assert_eq!(joint[0][2] + joint[2][0], 0);
    assert!((p(joint[1][1]) - 0.25).abs() < tol(0.25));
    for (i, j) in [(0, 0), (2, 2), (0, 1), (1, 0), (1, 2), (2, 1)] {
        assert!((p(joint[i][j]) - 0.125).abs() < tol(0.125), "({i},{j})");
    }
    let f = franson_coincidence_probability(&st);
    let frac = mm_same as f64 / mm as f64;
    assert!((frac - f).abs() < 4.0 * (f * (1.0 - f) / mm as f64).sqrt(), "{frac} vs {f}");
}
