//! Quantum payload: time-bin interference for the pulsed source,
//! polarization pair outcomes, coincidence sifting, QBER and CHSH.

use std::cmp::Ordering;
use std::f64::consts::FRAC_PI_4;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{CycleWindows, OpticsError};
use crate::records::DetectionRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QkdError {
    #[error("no pairs pass the basis filter")]
    EmptySample,
    #[error("no pairs for setting combination ({a}, {b})")]
    MissingSettingCombination { a: u8, b: u8 },
    #[error(transparent)]
    Layout(#[from] OpticsError),
}

/// Source phase and the two analyzer phases, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulsedPairState {
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Relative rate (max 1) of same-port middle/middle coincidences.
///
/// Two indistinguishable routes lead there: early emission through both
/// long analyzer arms (picking up `alpha + beta`) and late emission
/// (picking up `phi`) through both short arms.
pub fn franson_coincidence_probability(s: &PulsedPairState) -> f64 {
    let early_long = Complex64::from_polar(1.0, s.alpha + s.beta);
    let late_short = Complex64::from_polar(1.0, s.phi);
    (early_long + late_short).norm_sqr() / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseClass {
    Early,
    Middle,
    Late,
}

impl PhaseClass {
    pub const ALL: [PhaseClass; 3] = [PhaseClass::Early, PhaseClass::Middle, PhaseClass::Late];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// Three receive windows inside one source cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    windows: CycleWindows,
}

impl WindowLayout {
    /// Explicit windows as `[start, end)` offsets from `origin` within the
    /// cycle, in early/middle/late order.
    pub fn new(period_ps: i64, origin_ps: i64, windows: [(i64, i64); 3]) -> Result<Self, QkdError> {
        Ok(WindowLayout { windows: CycleWindows::new(period_ps, origin_ps, windows.to_vec())? })
    }

    /// Windows of `width` centred on `center - spacing`, `center`,
    /// `center + spacing`.
    pub fn centred(period_ps: i64, center_ps: i64, spacing_ps: i64, width_ps: i64) -> Result<Self, QkdError> {
        let half = period_ps / 2;
        let mk = |k: i64| {
            let c = half + k * spacing_ps;
            (c - width_ps / 2, c - width_ps / 2 + width_ps)
        };
        Self::new(period_ps, center_ps - half, [mk(-1), mk(0), mk(1)])
    }

    pub fn cycle(&self) -> &CycleWindows {
        &self.windows
    }
}

/// Which of the three windows a reading falls in; `None` when it falls in
/// a gap and would be gated away.
pub fn classify_phase(reading_ps: i64, layout: &WindowLayout) -> Option<PhaseClass> {
    layout.windows.locate(reading_ps).map(PhaseClass::from_index)
}

/// One pulsed-pair detection outcome per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeBinOutcome {
    pub slot_a: PhaseClass,
    pub slot_b: PhaseClass,
    pub port_a: u8,
    pub port_b: u8,
}

/// Samples arm choices and output ports for one time-bin pair. Only
/// middle/middle events interfere; everything else exits either port with
/// probability one half.
pub fn sample_time_bin_pair(state: &PulsedPairState, seed: u64) -> TimeBinOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let late_source = rng.random::<bool>() as usize;
    let long_a = rng.random::<bool>() as usize;
    let long_b = rng.random::<bool>() as usize;
    let slot_a = PhaseClass::from_index(late_source + long_a);
    let slot_b = PhaseClass::from_index(late_source + long_b);
    let port_a: u8 = rng.random_range(0..2);
    let port_b = if slot_a == PhaseClass::Middle && slot_b == PhaseClass::Middle {
        let same = rng.random::<f64>() < franson_coincidence_probability(state);
        if same { port_a } else { 1 - port_a }
    } else {
        rng.random_range(0..2)
    };
    TimeBinOutcome { slot_a, slot_b, port_a, port_b }
}

/// Singlet-state outcomes for analyzers at `angle_a`, `angle_b`:
/// `E(a, b) = -cos 2(a - b)`, then each bit independently flipped with
/// probability `intrinsic_error`.
pub fn sample_polarization_pair(angle_a: f64, angle_b: f64, intrinsic_error: f64, seed: u64) -> (u8, u8) {
    debug_assert!((0.0..=0.5).contains(&intrinsic_error));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bit_a: u8 = rng.random_range(0..2);
    let p_same = (angle_a - angle_b).sin().powi(2);
    let mut bit_b = if rng.random::<f64>() < p_same { bit_a } else { 1 - bit_a };
    let mut bit_a = bit_a;
    if rng.random::<f64>() < intrinsic_error {
        bit_a ^= 1;
    }
    if rng.random::<f64>() < intrinsic_error {
        bit_b ^= 1;
    }
    (bit_a, bit_b)
}

/// Analyzer angles indexed by setting (basis) number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzerSettings {
    pub alice: Vec<f64>,
    pub bob: Vec<f64>,
}

impl AnalyzerSettings {
    /// Rectilinear and diagonal bases on both sides.
    pub fn key_distribution() -> Self {
        AnalyzerSettings { alice: vec![0.0, FRAC_PI_4], bob: vec![0.0, FRAC_PI_4] }
    }

    /// `a = 0, a' = pi/4; b = pi/8, b' = 3 pi/8`.
    pub fn chsh() -> Self {
        AnalyzerSettings { alice: vec![0.0, FRAC_PI_4], bob: vec![FRAC_PI_4 / 2.0, 3.0 * FRAC_PI_4 / 2.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftedPair {
    pub reading_a: i64,
    pub reading_b: i64,
    pub basis_a: u8,
    pub basis_b: u8,
    pub bit_a: u8,
    pub bit_b: u8,
}

/// Pairs records with `|reading_b - offset - reading_a| <= window`, each
/// record used at most once, closest candidates first. Output is ordered by
/// Alice's reading.
pub fn sift(a: &[DetectionRecord], b: &[DetectionRecord], offset_ps: f64, window_ps: f64) -> Vec<SiftedPair> {
    struct Candidate {
        dist: f64,
        lo: f64,
        hi: f64,
        i: usize,
        j: usize,
    }
    let mut cands = Vec::new();
    let mut start = 0;
    for (i, ra) in a.iter().enumerate() {
        let x = ra.ps() as f64;
        while start < b.len() && (b[start].ps() as f64 - offset_ps) < x - window_ps {
            start += 1;
        }
        for (j, rb) in b.iter().enumerate().skip(start) {
            let y = rb.ps() as f64 - offset_ps;
            if y > x + window_ps {
                break;
            }
            cands.push(Candidate { dist: (y - x).abs(), lo: x.min(y), hi: x.max(y), i, j });
        }
    }
    // Ordering by (distance, min, max) is unchanged when the roles of the
    // two streams are swapped, so the pair set is symmetric.
    cands.sort_by(|p, q| {
        p.dist
            .total_cmp(&q.dist)
            .then(p.lo.total_cmp(&q.lo))
            .then(p.hi.total_cmp(&q.hi))
            .then(p.i.cmp(&q.i))
            .then(p.j.cmp(&q.j))
    });
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut out = Vec::new();
    for c in cands {
        if used_a[c.i] || used_b[c.j] {
            continue;
        }
        used_a[c.i] = true;
        used_b[c.j] = true;
        let (ra, rb) = (&a[c.i], &b[c.j]);
        out.push(SiftedPair {
            reading_a: ra.ps(),
            reading_b: rb.ps(),
            basis_a: ra.basis,
            basis_b: rb.basis,
            bit_a: ra.bit,
            bit_b: rb.bit,
        });
    }
    out.sort_by(|p, q| match p.reading_a.cmp(&q.reading_a) {
        Ordering::Equal => p.reading_b.cmp(&q.reading_b),
        o => o,
    });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisFilter {
    /// Both sides used the same setting.
    Matching,
    /// Both sides used this setting.
    Only(u8),
}

impl BasisFilter {
    fn accepts(self, p: &SiftedPair) -> bool {
        match self {
            BasisFilter::Matching => p.basis_a == p.basis_b,
            BasisFilter::Only(k) => p.basis_a == k && p.basis_b == k,
        }
    }
}

/// Error rate against the singlet's anti-correlation, and the number of
/// pairs that passed the filter.
pub fn qber(pairs: &[SiftedPair], filter: BasisFilter) -> Result<(f64, usize), QkdError> {
    let (mut n, mut errors) = (0usize, 0usize);
    for p in pairs.iter().filter(|p| filter.accepts(p)) {
        n += 1;
        if p.bit_a == p.bit_b {
            errors += 1;
        }
    }
    if n == 0 {
        return Err(QkdError::EmptySample);
    }
    Ok((errors as f64 / n as f64, n))
}

/// Key bits from basis-matched pairs; Bob inverts his bits.
pub fn sifted_keys(pairs: &[SiftedPair]) -> (Vec<u8>, Vec<u8>) {
    pairs
        .iter()
        .filter(|p| p.basis_a == p.basis_b)
        .map(|p| (p.bit_a, 1 - p.bit_b))
        .unzip()
}

/// Which setting indices play `a, a'` and `b, b'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChshSettings {
    pub a: u8,
    pub a_prime: u8,
    pub b: u8,
    pub b_prime: u8,
}

impl Default for ChshSettings {
    fn default() -> Self {
        ChshSettings { a: 0, a_prime: 1, b: 0, b_prime: 1 }
    }
}

fn spin(bit: u8) -> f64 {
    if bit == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Empirical correlator for one setting combination.
pub fn correlator(pairs: &[SiftedPair], a: u8, b: u8) -> Result<f64, QkdError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pairs.iter().filter(|p| p.basis_a == a && p.basis_b == b) {
        sum += spin(p.bit_a) * spin(p.bit_b);
        n += 1;
    }
    if n == 0 {
        return Err(QkdError::MissingSettingCombination { a, b });
    }
    Ok(sum / n as f64)
}

/// `S = |E(a,b) - E(a,b') + E(a',b) + E(a',b')|`.
pub fn chsh(pairs: &[SiftedPair], s: &ChshSettings) -> Result<f64, QkdError> {
    let e = |a, b| correlator(pairs, a, b);
    Ok((e(s.a, s.b)? - e(s.a, s.b_prime)? + e(s.a_prime, s.b)? + e(s.a_prime, s.b_prime)?).abs())
}
