//! Resampling and Butterworth band-pass filtering.
//!
//! Filters are designed from the analog Butterworth prototype, transformed
//! to the target band, and mapped to the z-plane with a pre-warped bilinear
//! transform. They are realized as cascaded second-order sections and run
//! forward-backward so the output has zero phase.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::EcgRecord;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("record has no samples")]
    EmptyRecord,
    #[error("target rate {target} Hz exceeds source rate {source_hz} Hz; upsampling is not supported")]
    Upsampling { source_hz: f64, target: f64 },
    #[error("invalid target rate {0} Hz")]
    InvalidRate(f64),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
}

/// Pre-processing filter configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSpec {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    /// Order of the Butterworth prototype. The band-pass has twice as many poles.
    pub order: usize,
    pub target_rate_hz: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self {
            low_cut_hz: 5.0,
            high_cut_hz: 15.0,
            order: 4,
            target_rate_hz: 200.0,
        }
    }
}

impl FilterSpec {
    pub fn validate_for_rate(&self, rate_hz: f64) -> Result<(), DspError> {
        if self.order == 0 || self.order > 16 {
            return Err(DspError::InvalidFilter(format!("order {} out of 1..=16", self.order)));
        }
        if !(self.low_cut_hz > 0.0 && self.low_cut_hz < self.high_cut_hz) {
            return Err(DspError::InvalidFilter(format!(
                "need 0 < low cut ({}) < high cut ({})",
                self.low_cut_hz, self.high_cut_hz
            )));
        }
        if self.high_cut_hz >= rate_hz / 2.0 {
            return Err(DspError::InvalidFilter(format!(
                "high cut {} Hz is at or above Nyquist ({} Hz)",
                self.high_cut_hz,
                rate_hz / 2.0
            )));
        }
        Ok(())
    }
}

/// One biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2]) / (self.a[0] + z_inv * self.a[1] + z2 * self.a[2])
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Direct-form II transposed state for a constant input `x`.
    fn steady_state(&self, x: f64) -> [f64; 2] {
        let y = self.dc_gain() * x;
        let z2 = self.b[2] * x - self.a[2] * y;
        let z1 = self.b[1] * x - self.a[1] * y + z2;
        [z1, z2]
    }

    fn run(&self, signal: &mut [f64], mut state: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        for x in signal.iter_mut() {
            let input = *x;
            let y = b0 * input + state[0];
            state[0] = b1 * input - a1 * y + state[1];
            state[1] = b2 * input - a2 * y;
            *x = y;
        }
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

#[derive(Clone, Copy)]
enum Band {
    LowPass(f64),
    BandPass(f64, f64),
}

fn prewarp(freq_hz: f64, rate_hz: f64) -> f64 {
    2.0 * rate_hz * (PI * freq_hz / rate_hz).tan()
}

fn bilinear(s: Complex64, rate_hz: f64) -> Complex64 {
    let k = Complex64::new(2.0 * rate_hz, 0.0);
    (k + s) / (k - s)
}

impl SosFilter {
    /// Butterworth band-pass with `order` prototype poles (2·order total).
    pub fn butter_bandpass(order: usize, low_hz: f64, high_hz: f64, rate_hz: f64) -> Result<Self, DspError> {
        if !(low_hz > 0.0 && low_hz < high_hz && high_hz < rate_hz / 2.0) || order == 0 {
            return Err(DspError::InvalidFilter(format!(
                "band-pass {low_hz}-{high_hz} Hz order {order} invalid at {rate_hz} Hz"
            )));
        }
        Ok(Self::design(order, Band::BandPass(low_hz, high_hz), rate_hz))
    }

    /// Butterworth low-pass with unit DC gain.
    pub fn butter_lowpass(order: usize, cutoff_hz: f64, rate_hz: f64) -> Result<Self, DspError> {
        if !(cutoff_hz > 0.0 && cutoff_hz < rate_hz / 2.0) || order == 0 {
            return Err(DspError::InvalidFilter(format!(
                "low-pass {cutoff_hz} Hz order {order} invalid at {rate_hz} Hz"
            )));
        }
        Ok(Self::design(order, Band::LowPass(cutoff_hz), rate_hz))
    }

    fn design(order: usize, band: Band, rate_hz: f64) -> Self {
        let prototype: Vec<Complex64> = (0..order)
            .map(|k| Complex64::from_polar(1.0, PI * (2 * k + order + 1) as f64 / (2 * order) as f64))
            .collect();

        let (analog_poles, zero_pair, reference_hz) = match band {
            Band::LowPass(fc) => {
                let wc = prewarp(fc, rate_hz);
                let poles: Vec<Complex64> = prototype.iter().map(|p| p * wc).collect();
                // zeros at s = inf map to z = -1
                (poles, [1.0, 2.0, 1.0], 0.0)
            }
            Band::BandPass(lo, hi) => {
                let w_lo = prewarp(lo, rate_hz);
                let w_hi = prewarp(hi, rate_hz);
                let bw = w_hi - w_lo;
                let w0_sq = w_lo * w_hi;
                let mut poles = Vec::with_capacity(2 * order);
                for p in &prototype {
                    let half = p * (bw / 2.0);
                    let root = (half * half - w0_sq).sqrt();
                    poles.push(half + root);
                    poles.push(half - root);
                }
                // one zero at s = 0 (z = 1) and one at s = inf (z = -1) per section
                let center_hz = rate_hz / PI * (w0_sq.sqrt() / (2.0 * rate_hz)).atan();
                (poles, [1.0, 0.0, -1.0], center_hz)
            }
        };

        let digital: Vec<Complex64> = analog_poles.iter().map(|&s| bilinear(s, rate_hz)).collect();
        let denominators = pair_conjugates(&digital);
        let mut sections: Vec<Biquad> = denominators
            .into_iter()
            .map(|a| Biquad { b: zero_pair, a })
            .collect();

        // Normalize to unit gain at DC (low-pass) or at the band center.
        let filter = SosFilter { sections: sections.clone() };
        let gain = filter.response(reference_hz, rate_hz).norm();
        let per_section = gain.powf(-1.0 / sections.len() as f64);
        for s in sections.iter_mut() {
            for b in s.b.iter_mut() {
                *b *= per_section;
            }
        }
        SosFilter { sections }
    }

    /// Complex frequency response of one forward pass.
    pub fn response(&self, freq_hz: f64, rate_hz: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq_hz / rate_hz);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    /// Causal single pass with zero initial state.
    pub fn filter(&self, signal: &[f64]) -> Vec<f64> {
        let mut out = signal.to_vec();
        for s in &self.sections {
            s.run(&mut out, [0.0, 0.0]);
        }
        out
    }

    fn filter_from_steady_state(&self, signal: &mut [f64]) {
        let Some(&first) = signal.first() else { return };
        let mut level = first;
        for s in &self.sections {
            s.run(signal, s.steady_state(level));
            level *= s.dc_gain();
        }
    }

    /// Zero-phase forward-backward filtering. The signal is extended at both
    /// ends by odd reflection and each pass starts from the steady state of
    /// its first sample.
    pub fn filtfilt(&self, signal: &[f64]) -> Vec<f64> {
        let n = signal.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        let (first, last) = (signal[0], signal[n - 1]);
        ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
        ext.extend_from_slice(signal);
        ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

        self.filter_from_steady_state(&mut ext);
        ext.reverse();
        self.filter_from_steady_state(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Groups poles into conjugate pairs (or pairs of real poles) and returns the
/// denominator of each section.
fn pair_conjugates(poles: &[Complex64]) -> Vec<[f64; 3]> {
    let tol = 1e-10;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > tol).collect();
    complex.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= tol).map(|p| p.re).collect();
    real.sort_by(f64::total_cmp);

    let mut out: Vec<[f64; 3]> = complex
        .iter()
        .map(|p| [1.0, -2.0 * p.re, p.norm_sqr()])
        .collect();
    for chunk in real.chunks(2) {
        match chunk {
            [p, q] => out.push([1.0, -(p + q), p * q]),
            [p] => out.push([1.0, -p, 0.0]),
            _ => unreachable!(),
        }
    }
    out
}

/// Zero-phase Butterworth band-pass of a record. The record's rate must
/// satisfy the filter's cutoff constraints; `spec.target_rate_hz` is ignored.
pub fn bandpass(record: &EcgRecord, spec: &FilterSpec) -> Result<EcgRecord, DspError> {
    if record.samples.is_empty() {
        return Err(DspError::EmptyRecord);
    }
    spec.validate_for_rate(record.sampling_rate_hz)?;
    let filter = SosFilter::butter_bandpass(spec.order, spec.low_cut_hz, spec.high_cut_hz, record.sampling_rate_hz)?;
    Ok(record.with_samples(filter.filtfilt(&record.samples), record.sampling_rate_hz))
}

const ANTI_ALIAS_ORDER: usize = 4;
const ANTI_ALIAS_FRACTION: f64 = 0.4;

/// Downsamples to `target_rate_hz`: zero-phase low-pass at 0.4 × target,
/// then linear interpolation on the new grid.
pub fn resample(record: &EcgRecord, target_rate_hz: f64) -> Result<EcgRecord, DspError> {
    if record.samples.is_empty() {
        return Err(DspError::EmptyRecord);
    }
    if !(target_rate_hz > 0.0 && target_rate_hz.is_finite()) {
        return Err(DspError::InvalidRate(target_rate_hz));
    }
    let source = record.sampling_rate_hz;
    if target_rate_hz > source {
        return Err(DspError::Upsampling {
            source_hz: source,
            target: target_rate_hz,
        });
    }
    if target_rate_hz == source {
        return Ok(record.clone());
    }

    let lowpass = SosFilter::butter_lowpass(ANTI_ALIAS_ORDER, ANTI_ALIAS_FRACTION * target_rate_hz, source)?;
    let smoothed = lowpass.filtfilt(&record.samples);
    let n_in = smoothed.len();
    let n_out = ((n_in as f64 * target_rate_hz / source).round() as usize).max(1);
    let ratio = source / target_rate_hz;
    let out = (0..n_out)
        .map(|k| {
            let pos = k as f64 * ratio;
            let i = pos.floor() as usize;
            if i + 1 >= n_in {
                smoothed[n_in - 1]
            } else {
                let frac = pos - i as f64;
                smoothed[i] + frac * (smoothed[i + 1] - smoothed[i])
            }
        })
        .collect();
    Ok(record.with_samples(out, target_rate_hz))
}
