//! Cross-correlation offset recovery between two agents' record streams.
//!
//! Offsets are `tau = reading_B - reading_A` for detections of the same
//! pair. Streams are binned on a shared grid, correlated over a lag range,
//! and the peak is tested against the Poissonian accidental background.
//! Periodic sources produce a comb of comparable peaks; that case is
//! reported as [`PeakOutcome::Ambiguous`] rather than picking one tooth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{reading_window, DetectionRecord};

/// Bins closer than this to the maximum are part of the main peak.
const PEAK_GUARD_BINS: i64 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelateError {
    #[error("bin widths differ ({0} ps vs {1} ps)")]
    BinWidthMismatch(i64, i64),
    #[error("bin width must be positive")]
    BadBinWidth,
    #[error("lag range [{0}, {1}] is empty or not a multiple of the bin width")]
    BadLagRange(i64, i64),
    #[error("no significant correlation peak")]
    NoPeak,
    #[error("correlation is ambiguous: comparable peaks every {period_est_ps} ps")]
    Ambiguous { period_est_ps: i64 },
    #[error("need at least 2 epochs, got {0}")]
    InsufficientEpochs(usize),
}

/// Counts per bin, stored sparsely. Bin `k` covers
/// `[start + k*w, start + (k+1)*w)`; `start` is always a multiple of `w`
/// so any two streams with the same width share a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinnedStream {
    pub bin_width: i64,
    pub start: i64,
    pub n_bins: usize,
    /// `(bin index, count)` in increasing index order, counts > 0.
    occupied: Vec<(i64, u32)>,
    pub dropped: usize,
}

impl BinnedStream {
    pub fn total(&self) -> u64 {
        self.occupied.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn count(&self, k: usize) -> u32 {
        match self.occupied.binary_search_by_key(&(k as i64), |&(i, _)| i) {
            Ok(pos) => self.occupied[pos].1,
            Err(_) => 0,
        }
    }

    /// Dense counts. Only sensible for short streams.
    pub fn counts(&self) -> Vec<u32> {
        let mut v = vec![0; self.n_bins];
        for &(i, c) in &self.occupied {
            v[i as usize] = c;
        }
        v
    }

    fn grid_index(&self) -> i64 {
        self.start / self.bin_width
    }
}

/// Bins sorted records. With `range = Some((start, n_bins))` the grid
/// starts at `start` (rounded down to a multiple of `bin_width`) and
/// records outside it are dropped; otherwise the grid covers all records.
pub fn bin(records: &[DetectionRecord], bin_width: i64, range: Option<(i64, usize)>) -> Result<BinnedStream, CorrelateError> {
    if bin_width <= 0 {
        return Err(CorrelateError::BadBinWidth);
    }
    let (start, n_bins) = match range {
        Some((s, n)) => (s.div_euclid(bin_width) * bin_width, n),
        None => match (records.first(), records.last()) {
            (Some(f), Some(l)) => {
                let s = f.ps().div_euclid(bin_width) * bin_width;
                let n = (l.ps() - s).div_euclid(bin_width) as usize + 1;
                (s, n)
            }
            _ => (0, 0),
        },
    };
    let mut occupied: Vec<(i64, u32)> = Vec::new();
    let mut dropped = 0;
    for r in records {
        let k = (r.ps() - start).div_euclid(bin_width);
        if k < 0 || k >= n_bins as i64 {
            dropped += 1;
            continue;
        }
        match occupied.last_mut() {
            Some((last, c)) if *last == k => *c += 1,
            _ => occupied.push((k, 1)),
        }
    }
    Ok(BinnedStream { bin_width, start, n_bins, occupied, dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationHistogram {
    pub bin_width: i64,
    pub tau_values: Vec<i64>,
    pub g: Vec<u64>,
    pub peak_index: usize,
    pub peak_value: u64,
    pub background_mean: f64,
}

impl CorrelationHistogram {
    /// `tau_ps,count` lines with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.g.len() * 12 + 16);
        s.push_str("tau_ps,count\n");
        for (t, g) in self.tau_values.iter().zip(&self.g) {
            s.push_str(&format!("{t},{g}\n"));
        }
        s
    }

    pub fn value_at(&self, tau_ps: i64) -> Option<u64> {
        let first = *self.tau_values.first()?;
        let k = (tau_ps - first).checked_div(self.bin_width)?;
        if (tau_ps - first) % self.bin_width != 0 || k < 0 {
            return None;
        }
        self.g.get(k as usize).copied()
    }
}

/// `g[k] = sum_j a[j] * b[j + lag_k]`, zero-padded, for lags covering
/// `[tau_min, tau_max]` (both multiples of the bin width).
pub fn cross_correlate(a: &BinnedStream, b: &BinnedStream, tau_min: i64, tau_max: i64) -> Result<CorrelationHistogram, CorrelateError> {
    if a.bin_width != b.bin_width {
        return Err(CorrelateError::BinWidthMismatch(a.bin_width, b.bin_width));
    }
    let w = a.bin_width;
    if tau_min > tau_max || tau_min % w != 0 || tau_max % w != 0 {
        return Err(CorrelateError::BadLagRange(tau_min, tau_max));
    }
    let (kmin, kmax) = (tau_min / w, tau_max / w);
    let len = (kmax - kmin + 1) as usize;
    let mut g = vec![0u64; len];
    let (ga, gb) = (a.grid_index(), b.grid_index());
    let mut lo = 0usize;
    for &(ia, ca) in &a.occupied {
        let ja = ga + ia;
        while lo < b.occupied.len() && gb + b.occupied[lo].0 < ja + kmin {
            lo += 1;
        }
        for &(ib, cb) in &b.occupied[lo..] {
            let lag = gb + ib - ja;
            if lag > kmax {
                break;
            }
            g[(lag - kmin) as usize] += ca as u64 * cb as u64;
        }
    }
    let tau_values: Vec<i64> = (kmin..=kmax).map(|k| k * w).collect();
    let (peak_index, peak_value) = g
        .iter()
        .enumerate()
        .fold((0, 0), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let background_mean = background_excluding(&g, peak_index, PEAK_GUARD_BINS);
    Ok(CorrelationHistogram { bin_width: w, tau_values, g, peak_index, peak_value, background_mean })
}

fn background_excluding(g: &[u64], center: usize, guard: i64) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    let guard = guard as usize;
    let lo = center.saturating_sub(guard);
    let hi = (center + guard).min(g.len() - 1);
    let n = g.len() - (hi + 1 - lo);
    if n == 0 {
        return 0.0;
    }
    let total: u64 = g[..lo].iter().chain(&g[hi + 1..]).sum();
    total as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    pub tau_ps: f64,
    pub uncertainty_ps: f64,
    /// Coincidences attributed to the peak.
    pub peak_counts: f64,
    pub bin_width: i64,
    /// Lag extent of the contiguous peak region, `[lo, hi)`.
    pub support_ps: (i64, i64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeakOutcome {
    Found(OffsetEstimate),
    NoPeak,
    Ambiguous { period_est_ps: i64, peaks_ps: Vec<i64> },
}

/// Significance test plus periodic-ambiguity check. The noise scale is
/// `sqrt(max(background, 1))`: with sub-count backgrounds a single
/// accidental would otherwise count as many sigma.
pub fn find_peak(h: &CorrelationHistogram, significance: f64, ambiguity_ratio: f64) -> PeakOutcome {
    if h.g.is_empty() || h.peak_value == 0 {
        return PeakOutcome::NoPeak;
    }
    let bg = h.background_mean;
    let sigma = bg.max(1.0).sqrt();
    let peak = h.peak_value as f64;
    if peak < bg + significance * sigma {
        return PeakOutcome::NoPeak;
    }
    let p = h.peak_index as i64;
    let n = h.g.len() as i64;

    // Contiguous region around the maximum standing above background.
    let cluster_thr = bg + 0.5 * significance * sigma;
    let mut lo = p;
    while lo > 0 && h.g[(lo - 1) as usize] as f64 > cluster_thr {
        lo -= 1;
    }
    let mut hi = p;
    while hi + 1 < n && h.g[(hi + 1) as usize] as f64 > cluster_thr {
        hi += 1;
    }
    let guard_lo = lo.min(p - PEAK_GUARD_BINS);
    let guard_hi = hi.max(p + PEAK_GUARD_BINS);

    let comparable = ambiguity_ratio * peak;
    let has_secondary = (0..n).any(|k| (k < guard_lo || k > guard_hi) && h.g[k as usize] as f64 >= comparable);
    if has_secondary {
        let peaks = comparable_peaks(h, comparable);
        return PeakOutcome::Ambiguous { period_est_ps: median_spacing(&peaks), peaks_ps: peaks };
    }

    let (mut num, mut den) = (0.0, 0.0);
    for k in (p - 1).max(0)..=(p + 1).min(n - 1) {
        let wgt = (h.g[k as usize] as f64 - bg).max(0.0);
        num += wgt * h.tau_values[k as usize] as f64;
        den += wgt;
    }
    let tau = if den > 0.0 { num / den } else { h.tau_values[p as usize] as f64 };
    let w = h.bin_width;
    PeakOutcome::Found(OffsetEstimate {
        tau_ps: tau,
        uncertainty_ps: w as f64 / den.max(1.0).sqrt(),
        peak_counts: den,
        bin_width: w,
        support_ps: (h.tau_values[lo as usize], h.tau_values[hi as usize] + w),
    })
}

/// Local maxima of groups of bins at or above `level`, grouping bins
/// separated by at most the guard distance.
fn comparable_peaks(h: &CorrelationHistogram, level: f64) -> Vec<i64> {
    let mut peaks = Vec::new();
    let mut group: Option<(usize, usize)> = None; // (argmax, last index)
    for (k, &v) in h.g.iter().enumerate() {
        if (v as f64) < level {
            continue;
        }
        group = match group {
            Some((best, last)) if (k - last) as i64 <= PEAK_GUARD_BINS => {
                Some((if v > h.g[best] { k } else { best }, k))
            }
            Some((best, _)) => {
                peaks.push(h.tau_values[best]);
                Some((k, k))
            }
            None => Some((k, k)),
        };
    }
    if let Some((best, _)) = group {
        peaks.push(h.tau_values[best]);
    }
    peaks
}

fn median_spacing(peaks: &[i64]) -> i64 {
    let mut d: Vec<i64> = peaks.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return 0;
    }
    d.sort_unstable();
    d[d.len() / 2]
}

/// Span shared by two sorted streams, in ps (at least 1).
fn overlap_span(a: &[DetectionRecord], b: &[DetectionRecord], tau: f64) -> f64 {
    match (a.first(), a.last(), b.first(), b.last()) {
        (Some(a0), Some(a1), Some(b0), Some(b1)) => {
            let lo = (a0.ps() as f64).max(b0.ps() as f64 - tau);
            let hi = (a1.ps() as f64).min(b1.ps() as f64 - tau);
            (hi - lo).max(1.0)
        }
        _ => 1.0,
    }
}

/// Re-correlates within `coarse_tau ± half_window` at `fine_width`.
/// The estimate is the median lag of the coincidences in the window,
/// each fine bin treated as uniformly filled.
pub fn refine(
    records_a: &[DetectionRecord],
    records_b: &[DetectionRecord],
    coarse_tau: f64,
    half_window: i64,
    fine_width: i64,
    significance: f64,
) -> Result<OffsetEstimate, CorrelateError> {
    if fine_width <= 0 || half_window <= 0 {
        return Err(CorrelateError::BadBinWidth);
    }
    let tau_min = ((coarse_tau - half_window as f64) / fine_width as f64).floor() as i64 * fine_width;
    let tau_max = ((coarse_tau + half_window as f64) / fine_width as f64).ceil() as i64 * fine_width;
    let a = bin(records_a, fine_width, None)?;
    let b = bin(records_b, fine_width, None)?;
    let h = cross_correlate(&a, &b, tau_min, tau_max)?;

    let total: u64 = h.g.iter().sum();
    let span = overlap_span(records_a, records_b, coarse_tau);
    let expected = records_a.len() as f64 * records_b.len() as f64 * (tau_max - tau_min + fine_width) as f64 / span;
    if total == 0 || (total as f64) < expected + significance * expected.max(1.0).sqrt() {
        return Err(CorrelateError::NoPeak);
    }
    let half = total as f64 / 2.0;
    let mut cum = 0.0;
    let mut tau = h.tau_values[h.peak_index] as f64;
    for (t, &g) in h.tau_values.iter().zip(&h.g) {
        if g == 0 {
            continue;
        }
        let next = cum + g as f64;
        if next >= half {
            tau = *t as f64 - fine_width as f64 / 2.0 + fine_width as f64 * (half - cum) / g as f64;
            break;
        }
        cum = next;
    }
    let peak_counts = (total as f64 - expected).max(1.0);
    Ok(OffsetEstimate {
        tau_ps: tau,
        uncertainty_ps: fine_width as f64 / peak_counts.sqrt(),
        peak_counts,
        bin_width: fine_width,
        support_ps: (tau_min, tau_max + fine_width),
    })
}

/// Knobs for coarse acquisition and fine refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelatorConfig {
    pub coarse_bin_ps: i64,
    pub fine_bin_ps: i64,
    pub tau_min_ps: i64,
    pub tau_max_ps: i64,
    pub significance: f64,
    pub ambiguity_ratio: f64,
    /// Acquisition widens the coarse bin by 4x up to this width when a
    /// drifting offset smears the peak below significance or into a
    /// comb-like shape.
    pub max_acquisition_bin_ps: i64,
}

impl Default for CorrelatorConfig {
    fn default() -> Self {
        CorrelatorConfig {
            coarse_bin_ps: 1_000,
            fine_bin_ps: 10,
            tau_min_ps: -50_000_000,
            tau_max_ps: 50_000_000,
            significance: 6.0,
            ambiguity_ratio: 0.5,
            max_acquisition_bin_ps: 1_000,
        }
    }
}

/// Result of a coarse-to-fine offset measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetMeasurement {
    pub coarse: OffsetEstimate,
    pub fine: OffsetEstimate,
    pub histogram: CorrelationHistogram,
}

/// Coarse acquisition over the configured lag range, then refinement
/// around the coarse peak.
pub fn measure_offset(a: &[DetectionRecord], b: &[DetectionRecord], cfg: &CorrelatorConfig) -> Result<OffsetMeasurement, CorrelateError> {
    let mut w = cfg.coarse_bin_ps;
    if w <= 0 {
        return Err(CorrelateError::BadBinWidth);
    }
    loop {
        let tau_min = cfg.tau_min_ps.div_euclid(w) * w;
        let tau_max = -((-cfg.tau_max_ps).div_euclid(w) * w);
        let h = cross_correlate(&bin(a, w, None)?, &bin(b, w, None)?, tau_min, tau_max)?;
        match find_peak(&h, cfg.significance, cfg.ambiguity_ratio) {
            PeakOutcome::Found(coarse) => {
                let center = (coarse.support_ps.0 + coarse.support_ps.1) as f64 / 2.0;
                let half = (coarse.support_ps.1 - coarse.support_ps.0) / 2 + w;
                let fine = refine(a, b, center, half, cfg.fine_bin_ps, cfg.significance)?;
                return Ok(OffsetMeasurement { coarse, fine, histogram: h });
            }
            // Poisson bumps across a drift-smeared peak can also look like
            // a comb at fine bins, so widening applies to both outcomes.
            PeakOutcome::NoPeak | PeakOutcome::Ambiguous { .. } if w * 4 <= cfg.max_acquisition_bin_ps => w *= 4,
            PeakOutcome::Ambiguous { period_est_ps, .. } => return Err(CorrelateError::Ambiguous { period_est_ps }),
            PeakOutcome::NoPeak => return Err(CorrelateError::NoPeak),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftEstimate {
    /// Offset extrapolated to A reading zero.
    pub tau0_ps: f64,
    /// d(tau)/d(reading_A), the relative rate error.
    pub slope: f64,
    /// `(epoch midpoint in A-reading seconds, tau_ps)`.
    pub epochs: Vec<(f64, f64)>,
}

impl DriftEstimate {
    pub fn tau_at_ps(&self, reading_a_ps: f64) -> f64 {
        self.tau0_ps + self.slope * reading_a_ps
    }
}

/// Splits A's readings into `epochs` consecutive epochs of
/// `epoch_length_ps`, measures the offset in each, and fits a line.
pub fn estimate_drift(
    a: &[DetectionRecord],
    b: &[DetectionRecord],
    epoch_length_ps: i64,
    epochs: usize,
    cfg: &CorrelatorConfig,
) -> Result<DriftEstimate, CorrelateError> {
    if epochs < 2 {
        return Err(CorrelateError::InsufficientEpochs(epochs));
    }
    let Some(first) = a.first() else {
        return Err(CorrelateError::NoPeak);
    };
    let mut points = Vec::with_capacity(epochs);
    for i in 0..epochs as i64 {
        let lo = first.ps() + i * epoch_length_ps;
        let hi = lo + epoch_length_ps;
        let sa = reading_window(a, lo, hi);
        let sb = reading_window(b, lo.saturating_add(cfg.tau_min_ps), hi.saturating_add(cfg.tau_max_ps));
        let m = measure_offset(sa, sb, cfg)?;
        let mid_s = (lo as f64 + epoch_length_ps as f64 / 2.0) * 1e-12;
        points.push((mid_s, m.fine.tau_ps));
    }
    let (slope_per_s, intercept) = least_squares(&points);
    Ok(DriftEstimate { tau0_ps: intercept, slope: slope_per_s * 1e-12, epochs: points })
}

/// Ordinary least squares `y = m x + c`; returns `(m, c)`.
pub fn least_squares(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let m = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (m, my - m * mx)
}
