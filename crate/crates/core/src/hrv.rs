//! RR interval series and HRV feature sets.
//!
//! Three feature sets are computed on any slice of RR intervals:
//! statistical time-domain measures, Poincaré plot axes, and LF/HF band
//! powers of the resampled tachogram.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qrs::BeatTimes;

pub const RR_MIN_MS: f64 = 300.0;
pub const RR_MAX_MS: f64 = 2000.0;

pub const LF_BAND_HZ: (f64, f64) = (0.05, 0.2);
pub const HF_BAND_HZ: (f64, f64) = (0.2, 0.4);
pub const TACHOGRAM_RATE_HZ: f64 = 4.0;
pub const WELCH_SEGMENT: usize = 64;
pub const FREQ_MIN_SPAN_S: f64 = 20.0;
pub const FREQ_MIN_BEATS: usize = 8;
/// Band power below this is rounding residue of a flat tachogram.
pub const POWER_FLOOR_MS2: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum HrvError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("rr and time slices differ in length ({rr} vs {times})")]
    Misaligned { rr: usize, times: usize },
}

/// Successive RR intervals with artifact rejection applied.
///
/// `rr_ms[i]` is the interval that ends at beat `rr_end_s[i]`; it starts at
/// the kept beat immediately before. Without rejected gaps,
/// `rr_ms[i] == (beat_times_s[i + 1] - beat_times_s[i]) * 1000`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RrSeries {
    pub beat_times_s: Vec<f64>,
    pub rr_ms: Vec<f64>,
    pub rr_end_s: Vec<f64>,
    /// Number of intervals dropped by the physiological range check.
    pub rejected: usize,
}

impl RrSeries {
    pub fn len(&self) -> usize {
        self.rr_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rr_ms.is_empty()
    }

    /// Start time of interval `i`.
    pub fn rr_start_s(&self, i: usize) -> f64 {
        self.rr_end_s[i] - self.rr_ms[i] / 1000.0
    }

    /// Index range of the intervals lying entirely in `[start_s, end_s)`.
    pub fn slice_range(&self, start_s: f64, end_s: f64) -> std::ops::Range<usize> {
        // interval start times are non-decreasing, so binary search applies
        let (mut lo, mut hi) = (0, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.rr_start_s(mid) < start_s {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let hi = self.rr_end_s.partition_point(|&t| t < end_s);
        lo..hi.max(lo)
    }
}

/// Converts beat times to RR intervals, dropping those outside
/// [`RR_MIN_MS`, `RR_MAX_MS`].
///
/// A too-short interval is treated as a spurious extra beat: the closing beat
/// is discarded and the next interval is measured from the last kept beat. A
/// too-long interval (missed beats) is dropped but both beats are kept.
pub fn derive_rr(beats: &BeatTimes) -> RrSeries {
    let mut series = RrSeries::default();
    let Some((&first, rest)) = beats.times_s.split_first() else {
        return series;
    };
    series.beat_times_s.push(first);
    let mut last = first;
    for &t in rest {
        let rr = (t - last) * 1000.0;
        if rr < RR_MIN_MS {
            log::debug!("rejecting {rr:.1} ms interval ending at {t:.3} s (extra beat dropped)");
            series.rejected += 1;
            continue;
        }
        series.beat_times_s.push(t);
        last = t;
        if rr > RR_MAX_MS {
            log::debug!("rejecting {rr:.1} ms interval ending at {t:.3} s (gap)");
            series.rejected += 1;
            continue;
        }
        series.rr_ms.push(rr);
        series.rr_end_s.push(t);
    }
    series
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatFeatures {
    pub mean_rr_ms: f64,
    pub std_rr_ms: f64,
    pub mean_abs_diff_ms: f64,
    pub sdnn_ms: f64,
    pub rmssd_ms: f64,
    pub nn20_count: f64,
    pub nn50_count: f64,
    pub pnn50_pct: f64,
}

impl StatFeatures {
    pub const NAMES: [&'static str; 8] = [
        "mean_rr_ms",
        "std_rr_ms",
        "mean_abs_diff_ms",
        "sdnn_ms",
        "rmssd_ms",
        "nn20",
        "nn50",
        "pnn50_pct",
    ];

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.mean_rr_ms,
            self.std_rr_ms,
            self.mean_abs_diff_ms,
            self.sdnn_ms,
            self.rmssd_ms,
            self.nn20_count,
            self.nn50_count,
            self.pnn50_pct,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareFeatures {
    pub sd1_ms: f64,
    pub sd2_ms: f64,
    pub sd_ratio: f64,
}

impl PoincareFeatures {
    pub const NAMES: [&'static str; 3] = ["sd1_ms", "sd2_ms", "sd1_sd2_ratio"];

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.sd1_ms, self.sd2_ms, self.sd_ratio]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreqFeatures {
    pub lf_power_ms2: f64,
    pub hf_power_ms2: f64,
    pub lf_hf_ratio: f64,
}

impl FreqFeatures {
    pub const NAMES: [&'static str; 3] = ["lf_power_ms2", "hf_power_ms2", "lf_hf_ratio"];

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.lf_power_ms2, self.hf_power_ms2, self.lf_hf_ratio]
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 divisor).
fn sample_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

fn require(len: usize, min: usize, what: &str) -> Result<(), HrvError> {
    if len < min {
        return Err(HrvError::InsufficientData(format!(
            "{what} needs at least {min} RR intervals, got {len}"
        )));
    }
    Ok(())
}

pub fn stat_features(rr: &[f64]) -> Result<StatFeatures, HrvError> {
    require(rr.len(), 2, "statistical features")?;
    let diffs: Vec<f64> = rr.windows(2).map(|w| w[1] - w[0]).collect();
    let sdnn = sample_std(rr);
    let nn20 = diffs.iter().filter(|d| d.abs() > 20.0).count();
    let nn50 = diffs.iter().filter(|d| d.abs() > 50.0).count();
    Ok(StatFeatures {
        mean_rr_ms: mean(rr),
        std_rr_ms: sdnn,
        mean_abs_diff_ms: diffs.iter().map(|d| d.abs()).sum::<f64>() / diffs.len() as f64,
        sdnn_ms: sdnn,
        rmssd_ms: (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt(),
        nn20_count: nn20 as f64,
        nn50_count: nn50 as f64,
        pnn50_pct: 100.0 * nn50 as f64 / diffs.len() as f64,
    })
}

pub fn poincare_features(rr: &[f64]) -> Result<PoincareFeatures, HrvError> {
    require(rr.len(), 3, "Poincaré features")?;
    let sqrt2 = std::f64::consts::SQRT_2;
    let minor: Vec<f64> = rr.windows(2).map(|w| (w[1] - w[0]) / sqrt2).collect();
    let major: Vec<f64> = rr.windows(2).map(|w| (w[1] + w[0]) / sqrt2).collect();
    let sd1 = sample_std(&minor);
    let sd2 = sample_std(&major);
    Ok(PoincareFeatures {
        sd1_ms: sd1,
        sd2_ms: sd2,
        sd_ratio: if sd2 > 0.0 { sd1 / sd2 } else { 0.0 },
    })
}

/// Natural cubic spline through `(xs, ys)` evaluated at `at`.
/// `xs` must be strictly increasing and `at` within `[xs[0], xs[n-1]]`.
pub(crate) fn natural_cubic_spline(xs: &[f64], ys: &[f64], at: &[f64]) -> Vec<f64> {
    let n = xs.len();
    debug_assert!(n >= 2 && ys.len() == n);
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    // second derivatives, m[0] = m[n-1] = 0, tridiagonal system for the rest
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
        }
        // Thomas algorithm; sub- and super-diagonal entries are h[i + 1]
        for i in 1..k {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * h[i];
            rhs[i] -= w * rhs[i - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
        }
    }

    let mut seg = 0;
    at.iter()
        .map(|&t| {
            while seg + 2 < n && t > xs[seg + 1] {
                seg += 1;
            }
            let (x0, x1, hi) = (xs[seg], xs[seg + 1], h[seg]);
            let (a, b) = ((x1 - t) / hi, (t - x0) / hi);
            a * ys[seg]
                + b * ys[seg + 1]
                + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * hi * hi / 6.0
        })
        .collect()
}

/// One-sided Welch PSD with a periodic Hann taper and 50% overlap.
/// Returns `(bin spacing in Hz, density per bin)`.
pub(crate) fn welch_psd(signal: &[f64], rate_hz: f64, segment: usize) -> (f64, Vec<f64>) {
    let step = segment / 2;
    let window: Vec<f64> = (0..segment)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / segment as f64).cos())
        .collect();
    let norm = rate_hz * window.iter().map(|w| w * w).sum::<f64>();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(segment);
    let bins = segment / 2 + 1;
    let mut psd = vec![0.0; bins];
    let mut count = 0usize;
    let mut buf = vec![Complex64::new(0.0, 0.0); segment];
    let mut start = 0;
    while start + segment <= signal.len() {
        for (b, (x, w)) in buf.iter_mut().zip(signal[start..start + segment].iter().zip(&window)) {
            *b = Complex64::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            *p += buf[k].norm_sqr();
        }
        count += 1;
        start += step;
    }
    for (k, p) in psd.iter_mut().enumerate() {
        let one_sided = if k == 0 || (segment % 2 == 0 && k == segment / 2) { 1.0 } else { 2.0 };
        *p *= one_sided / (norm * count as f64);
    }
    (rate_hz / segment as f64, psd)
}

/// Integrated PSD over bins with `lo <= f < hi`.
pub(crate) fn band_power(df: f64, psd: &[f64], (lo, hi): (f64, f64)) -> f64 {
    psd.iter()
        .enumerate()
        .filter(|(k, _)| {
            let f = *k as f64 * df;
            f >= lo && f < hi
        })
        .map(|(_, p)| p * df)
        .sum()
}

/// Evenly resampled, mean-removed tachogram on the [`TACHOGRAM_RATE_HZ`] grid.
pub(crate) fn tachogram(rr: &[f64], times_s: &[f64]) -> Vec<f64> {
    let t0 = times_s[0];
    let span = times_s[times_s.len() - 1] - t0;
    let n = (span * TACHOGRAM_RATE_HZ).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|k| t0 + k as f64 / TACHOGRAM_RATE_HZ).collect();
    let mut series = natural_cubic_spline(times_s, rr, &grid);
    let m = mean(&series);
    for v in series.iter_mut() {
        *v -= m;
    }
    series
}

/// LF and HF power of the RR tachogram. `times_s[i]` is the time of the beat
/// closing `rr[i]`.
pub fn freq_features(rr: &[f64], times_s: &[f64]) -> Result<FreqFeatures, HrvError> {
    if rr.len() != times_s.len() {
        return Err(HrvError::Misaligned {
            rr: rr.len(),
            times: times_s.len(),
        });
    }
    if rr.len() + 1 < FREQ_MIN_BEATS {
        return Err(HrvError::InsufficientData(format!(
            "frequency features need {FREQ_MIN_BEATS} beats, got {}",
            rr.len() + 1
        )));
    }
    let span = times_s[times_s.len() - 1] - times_s[0];
    if span < FREQ_MIN_SPAN_S {
        return Err(HrvError::InsufficientData(format!(
            "frequency features need a {FREQ_MIN_SPAN_S} s tachogram, got {span:.2} s"
        )));
    }
    let series = tachogram(rr, times_s);
    let (df, psd) = welch_psd(&series, TACHOGRAM_RATE_HZ, WELCH_SEGMENT);
    let lf = band_power(df, &psd, LF_BAND_HZ);
    let hf = band_power(df, &psd, HF_BAND_HZ);
    Ok(FreqFeatures {
        lf_power_ms2: lf,
        hf_power_ms2: hf,
        lf_hf_ratio: if hf > POWER_FLOOR_MS2 { lf / hf } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn beats(times: &[f64]) -> BeatTimes {
        BeatTimes {
            times_s: times.to_vec(),
        }
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    /// Beat times whose RR follows `rr(t)` in ms.
    fn modulated_beats(duration: f64, rr_at: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = vec![t];
        while t < duration {
            t += rr_at(t) / 1000.0;
            out.push(t);
        }
        out
    }

    #[test]
    fn rr_from_regular_beats() {
        let rr = derive_rr(&beats(&[0.0, 0.8, 1.6]));
        assert_eq!(rr.rr_ms.len(), 2);
        assert!(rr.rr_ms.iter().all(|v| (v - 800.0).abs() < 1e-9));
        assert!(derive_rr(&beats(&[3.2])).is_empty());
        assert!(derive_rr(&beats(&[])).is_empty());
    }

    #[test]
    fn rr_rejects_short_interval_with_its_beat() {
        let rr = derive_rr(&beats(&[0.0, 0.8, 1.85, 2.05]));
        let rounded: Vec<f64> = rr.rr_ms.iter().map(|v| v.round()).collect();
        assert_eq!(rounded, vec![800.0, 1050.0]);
        assert_eq!(rr.rejected, 1);
        assert_eq!(rr.beat_times_s, vec![0.0, 0.8, 1.85]);
    }

    #[test]
    fn rr_drops_long_gaps_but_keeps_beats() {
        let rr = derive_rr(&beats(&[0.0, 1.0, 4.0, 5.0]));
        assert_eq!(rr.rr_ms.len(), 2);
        assert_eq!(rr.rr_end_s, vec![1.0, 5.0]);
        assert_eq!(rr.rejected, 1);
        assert!((rr.rr_start_s(1) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn stat_constant_series() {
        let f = stat_features(&[800.0; 10]).unwrap();
        assert_eq!(f.mean_rr_ms, 800.0);
        assert_eq!((f.sdnn_ms, f.rmssd_ms, f.nn20_count, f.nn50_count, f.pnn50_pct), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn stat_alternating_series() {
        let f = stat_features(&[800.0, 810.0, 800.0, 810.0, 800.0]).unwrap();
        assert!((f.rmssd_ms - 10.0).abs() < 1e-12);
        assert!((f.mean_abs_diff_ms - 10.0).abs() < 1e-12);
        assert_eq!((f.nn20_count, f.nn50_count), (0.0, 0.0));
        let f = stat_features(&[700.0, 760.0, 700.0]).unwrap();
        assert_eq!((f.nn50_count, f.pnn50_pct), (2.0, 100.0));
    }

    #[test]
    fn nn_thresholds_are_strict() {
        let f = stat_features(&[800.0, 820.0, 870.0]).unwrap();
        assert_eq!((f.nn20_count, f.nn50_count), (1.0, 0.0));
    }

    #[test]
    fn insufficient_data_errors() {
        assert!(matches!(stat_features(&[800.0]), Err(HrvError::InsufficientData(_))));
        assert!(matches!(poincare_features(&[800.0, 810.0]), Err(HrvError::InsufficientData(_))));
        let rr = [800.0; 30];
        let t: Vec<f64> = (1..=30).map(|i| i as f64 * 0.5).collect(); // 14.5 s span
        assert!(matches!(freq_features(&rr, &t), Err(HrvError::InsufficientData(_))));
        assert!(matches!(freq_features(&rr, &t[..3]), Err(HrvError::Misaligned { .. })));
    }

    #[test]
    fn poincare_constant_series() {
        let p = poincare_features(&[800.0; 5]).unwrap();
        assert_eq!((p.sd1_ms, p.sd2_ms, p.sd_ratio), (0.0, 0.0, 0.0));
    }

    /// Standard deviation along the minor and major axes of the lag-1 point
    /// cloud, from its sample covariance matrix.
    fn covariance_axes(rr: &[f64]) -> (f64, f64) {
        let x = &rr[..rr.len() - 1];
        let y = &rr[1..];
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let mut sxx = 0.0;
        let mut syy = 0.0;
        let mut sxy = 0.0;
        for (a, b) in x.iter().zip(y) {
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
            sxy += (a - mx) * (b - my);
        }
        let (sxx, syy, sxy) = (sxx / (n - 1.0), syy / (n - 1.0), sxy / (n - 1.0));
        // variance along unit vectors (1,-1)/√2 and (1,1)/√2
        let minor = (sxx + syy - 2.0 * sxy) / 2.0;
        let major = (sxx + syy + 2.0 * sxy) / 2.0;
        (minor.max(0.0).sqrt(), major.max(0.0).sqrt())
    }

    #[test]
    fn poincare_alternating_matches_covariance_oracle() {
        let rr = [800.0, 820.0, 800.0, 820.0, 800.0, 820.0];
        let p = poincare_features(&rr).unwrap();
        let (sd1, sd2) = covariance_axes(&rr);
        assert!(close(p.sd1_ms, sd1, 1e-9));
        assert!(close(p.sd2_ms, sd2, 1e-9));
        // diffs (20, -20, 20, -20, 20): mean 4, sample variance 480
        assert!(close(p.sd1_ms, (480.0_f64 / 2.0).sqrt(), 1e-12));
    }

    #[test]
    fn freq_constant_series_has_no_power() {
        let t: Vec<f64> = (1..=150).map(|i| i as f64 * 0.8).collect();
        let rr = vec![800.0; t.len()];
        let f = freq_features(&rr, &t).unwrap();
        assert!(f.lf_power_ms2 < 1e-6 && f.hf_power_ms2 < 1e-6);
        assert_eq!(f.lf_hf_ratio, 0.0);
    }

    fn freq_of(mod_hz: f64) -> FreqFeatures {
        let b = modulated_beats(120.0, |t| 800.0 + 50.0 * (2.0 * std::f64::consts::PI * mod_hz * t).sin());
        let rr = derive_rr(&beats(&b));
        freq_features(&rr.rr_ms, &rr.rr_end_s).unwrap()
    }

    #[test]
    fn lf_modulation_dominates_lf_band() {
        let f = freq_of(0.1);
        assert!(f.lf_hf_ratio > 5.0, "{f:?}");
        let reference = f.lf_power_ms2;
        assert!(reference > 100.0);
    }

    #[test]
    fn hf_modulation_dominates_hf_band() {
        let f = freq_of(0.3);
        assert!(f.hf_power_ms2 > 5.0 * f.lf_power_ms2, "{f:?}");
    }

    #[test]
    fn spline_interpolates_knots_and_cubic_free_lines() {
        let xs = [0.0, 1.0, 2.5, 3.0, 5.0];
        let ys = [1.0, 3.0, 6.0, 7.0, 11.0];
        let at = [0.0, 0.5, 1.0, 2.5, 4.0, 5.0];
        let out = natural_cubic_spline(&xs, &ys, &at);
        for (t, v) in at.iter().zip(&out) {
            assert!((v - (1.0 + 2.0 * t)).abs() < 1e-12, "{t}: {v}");
        }
    }

    #[test]
    fn welch_parseval_for_white_sequence() {
        // For a sinusoid centred on a bin, integrated PSD ≈ signal power.
        let n = 512;
        let f0 = 8.0 * 4.0 / 64.0;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * f0 * i as f64 / 4.0).sin()).collect();
        let (df, psd) = welch_psd(&x, 4.0, 64);
        let total: f64 = psd.iter().map(|p| p * df).sum();
        assert!((total - 0.5).abs() < 0.01 * 0.5 * 3.0, "{total}");
    }

    proptest! {
        #[test]
        fn time_shift_invariance(shift in -500.0f64..500.0, seed in 0u64..1000) {
            let b = modulated_beats(60.0, |t| 850.0 + 60.0 * (0.3 * t + seed as f64).sin() + 20.0 * (1.7 * t).cos());
            let shifted: Vec<f64> = b.iter().map(|t| t + shift).collect();
            let r1 = derive_rr(&beats(&b));
            let r2 = derive_rr(&beats(&shifted));
            let s1 = stat_features(&r1.rr_ms).unwrap().to_vec();
            let s2 = stat_features(&r2.rr_ms).unwrap().to_vec();
            for (a, c) in s1.iter().zip(&s2) {
                prop_assert!((a - c).abs() <= 1e-6 * a.abs().max(1.0));
            }
            let f1 = freq_features(&r1.rr_ms, &r1.rr_end_s).unwrap().to_vec();
            let f2 = freq_features(&r2.rr_ms, &r2.rr_end_s).unwrap().to_vec();
            for (a, c) in f1.iter().zip(&f2) {
                prop_assert!((a - c).abs() <= 1e-4 * a.abs().max(1.0));
            }
        }

        #[test]
        fn poincare_rotation_preserves_trace(rr in prop::collection::vec(300.0f64..2000.0, 3..60)) {
            let p = poincare_features(&rr).unwrap();
            let x = &rr[..rr.len() - 1];
            let y = &rr[1..];
            let var = |s: &[f64]| { let m = mean(s); s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s.len() - 1) as f64 };
            let total = var(x) + var(y);
            let got = p.sd1_ms.powi(2) + p.sd2_ms.powi(2);
            prop_assert!((got - total).abs() <= 1e-9 * total.max(1e-9) + 1e-9);
            let (sd1, sd2) = covariance_axes(&rr);
            prop_assert!((p.sd1_ms - sd1).abs() <= 1e-6 * sd1.max(1.0));
            prop_assert!((p.sd2_ms - sd2).abs() <= 1e-6 * sd2.max(1.0));
        }

        #[test]
        fn scaling_scales_time_domain_measures(rr in prop::collection::vec(300.0f64..1500.0, 3..40), k in 0.5f64..1.3) {
            let scaled: Vec<f64> = rr.iter().map(|v| v * k).collect();
            let (a, b) = (stat_features(&rr).unwrap(), stat_features(&scaled).unwrap());
            for (x, y) in [(a.mean_rr_ms, b.mean_rr_ms), (a.sdnn_ms, b.sdnn_ms), (a.rmssd_ms, b.rmssd_ms)] {
                prop_assert!((x * k - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
            let diffs: Vec<f64> = scaled.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
            prop_assert_eq!(b.nn50_count as usize, diffs.iter().filter(|d| **d > 50.0).count());
            prop_assert!(b.nn50_count <= b.nn20_count);
            prop_assert!((0.0..=100.0).contains(&b.pnn50_pct));
            let (pa, pb) = (poincare_features(&rr).unwrap(), poincare_features(&scaled).unwrap());
            prop_assert!((pa.sd1_ms * k - pb.sd1_ms).abs() <= 1e-9 * pb.sd1_ms.max(1.0));
            prop_assert!((pa.sd2_ms * k - pb.sd2_ms).abs() <= 1e-9 * pb.sd2_ms.max(1.0));
        }

        #[test]
        fn recomputation_is_bit_identical(rr in prop::collection::vec(300.0f64..2000.0, 8..80)) {
            let times: Vec<f64> = rr.iter().scan(0.0, |t, v| { *t += v / 1000.0; Some(*t) }).collect();
            prop_assert_eq!(stat_features(&rr).unwrap(), stat_features(&rr).unwrap());
            prop_assert_eq!(poincare_features(&rr).unwrap(), poincare_features(&rr).unwrap());
            if times[times.len() - 1] - times[0] >= FREQ_MIN_SPAN_S {
                prop_assert_eq!(freq_features(&rr, &times).unwrap(), freq_features(&rr, &times).unwrap());
            }
        }
    }
}
