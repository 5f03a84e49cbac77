//! Pan-Tompkins R-peak detection on an already band-passed ECG.
//!
//! Stages: five-point derivative, squaring, moving-window integration, then
//! dual adaptive thresholds on the integrated and filtered signals with
//! running signal/noise peak estimates, a refractory period, and search-back
//! for missed beats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::EcgRecord;

#[derive(Debug, Error, PartialEq)]
pub enum QrsError {
    #[error("record is {duration_s:.3} s long; at least {required_s} s is needed to initialize thresholds")]
    TooShort { duration_s: f64, required_s: f64 },
}

/// Detected R-peak times, strictly increasing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BeatTimes {
    pub times_s: Vec<f64>,
}

impl BeatTimes {
    pub fn len(&self) -> usize {
        self.times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_s.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanTompkinsConfig {
    pub integration_window_s: f64,
    pub refractory_s: f64,
    pub learning_s: f64,
    /// Search back once the gap exceeds this multiple of the running RR average.
    pub search_back_factor: f64,
    /// Half-width of the R-peak localization window on the filtered signal.
    pub localization_s: f64,
}

impl Default for PanTompkinsConfig {
    fn default() -> Self {
        Self {
            integration_window_s: 0.150,
            refractory_s: 0.200,
            learning_s: 2.0,
            search_back_factor: 1.66,
            localization_s: 0.075,
        }
    }
}

/// Five-point derivative `(-x[n-2] - 2x[n-1] + 2x[n+1] + x[n+2]) / 8T`,
/// centered so it adds no delay. Edges are zero.
pub fn derivative(signal: &[f64], rate_hz: f64) -> Vec<f64> {
    let n = signal.len();
    let mut out = vec![0.0; n];
    let scale = rate_hz / 8.0;
    for i in 2..n.saturating_sub(2) {
        out[i] = (-signal[i - 2] - 2.0 * signal[i - 1] + 2.0 * signal[i + 1] + signal[i + 2]) * scale;
    }
    out
}

/// Centered moving average over `width` samples.
pub fn moving_window_integration(signal: &[f64], width: usize) -> Vec<f64> {
    let n = signal.len();
    let width = width.max(1);
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in signal {
        acc += v;
        prefix.push(acc);
    }
    let back = width / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(back);
            let hi = (lo + width).min(n);
            (prefix[hi] - prefix[lo]) / width as f64
        })
        .collect()
}

/// Local maxima of `signal` separated by at least `min_distance` samples.
/// Taller peaks win; survivors are returned in index order.
fn candidate_peaks(signal: &[f64], min_distance: usize) -> Vec<usize> {
    let n = signal.len();
    let mut peaks: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&i| signal[i] > 0.0 && signal[i] > signal[i - 1] && signal[i] >= signal[i + 1])
        .collect();
    let mut by_height = peaks.clone();
    by_height.sort_by(|&a, &b| signal[b].total_cmp(&signal[a]).then(a.cmp(&b)));
    let mut keep = vec![false; n];
    let mut taken: Vec<usize> = Vec::new();
    for idx in by_height {
        // `taken` stays sorted so neighbours are found by binary search
        let pos = taken.partition_point(|&t| t < idx);
        let clash_left = pos > 0 && idx - taken[pos - 1] < min_distance;
        let clash_right = pos < taken.len() && taken[pos] - idx < min_distance;
        if !clash_left && !clash_right {
            taken.insert(pos, idx);
            keep[idx] = true;
        }
    }
    peaks.retain(|&i| keep[i]);
    peaks
}

#[derive(Debug, Clone, Copy)]
struct Levels {
    signal: f64,
    noise: f64,
}

impl Levels {
    fn threshold1(&self) -> f64 {
        self.noise + 0.25 * (self.signal - self.noise)
    }

    fn threshold2(&self) -> f64 {
        0.5 * self.threshold1()
    }
}

struct Candidate {
    index: usize,
    location: usize,
    integrated: f64,
    filtered: f64,
}

/// Detects R-peaks with the default configuration.
pub fn detect_r_peaks(record: &EcgRecord) -> Result<BeatTimes, QrsError> {
    detect_r_peaks_with(record, &PanTompkinsConfig::default())
}

pub fn detect_r_peaks_with(record: &EcgRecord, config: &PanTompkinsConfig) -> Result<BeatTimes, QrsError> {
    let fs = record.sampling_rate_hz;
    let x = &record.samples;
    let duration_s = record.duration_s();
    if duration_s < config.learning_s {
        return Err(QrsError::TooShort {
            duration_s,
            required_s: config.learning_s,
        });
    }
    let first = x[0];
    if x.iter().all(|&v| v == first) {
        return Ok(BeatTimes::default());
    }

    let samples = |secs: f64| ((secs * fs).round() as usize).max(1);
    let refractory = samples(config.refractory_s);
    let half_loc = samples(config.localization_s);
    let learning = samples(config.learning_s).min(x.len());

    let squared: Vec<f64> = derivative(x, fs).into_iter().map(|d| d * d).collect();
    let integrated = moving_window_integration(&squared, samples(config.integration_window_s));

    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let mut int_levels = Levels {
        signal: integrated[..learning].iter().copied().fold(f64::MIN, f64::max),
        noise: mean(&integrated[..learning]),
    };
    let abs_filtered: Vec<f64> = x[..learning].iter().map(|v| v.abs()).collect();
    let mut filt_levels = Levels {
        signal: x[..learning].iter().copied().fold(f64::MIN, f64::max),
        noise: mean(&abs_filtered),
    };

    let locate = |center: usize| -> usize {
        let lo = center.saturating_sub(half_loc);
        let hi = (center + half_loc).min(x.len() - 1);
        (lo..=hi).fold(lo, |best, i| if x[i] > x[best] { i } else { best })
    };

    let mut beats: Vec<usize> = Vec::new();
    let mut rr_recent: Vec<usize> = Vec::new();
    // candidates classified as noise since the last accepted beat
    let mut pending: Vec<Candidate> = Vec::new();

    let accept = |beats: &mut Vec<usize>, rr_recent: &mut Vec<usize>, location: usize| {
        if let Some(&last) = beats.last() {
            rr_recent.push(location - last);
            if rr_recent.len() > 8 {
                rr_recent.remove(0);
            }
        }
        beats.push(location);
    };

    for index in candidate_peaks(&integrated, refractory) {
        let location = locate(index);
        let candidate = Candidate {
            index,
            location,
            integrated: integrated[index],
            filtered: x[location],
        };

        // Search back while the gap since the last beat is too long.
        while let (Some(&last), false) = (beats.last(), rr_recent.is_empty()) {
            let rr_avg = rr_recent.iter().sum::<usize>() as f64 / rr_recent.len() as f64;
            if (candidate.index.saturating_sub(last)) as f64 <= config.search_back_factor * rr_avg {
                break;
            }
            let best = pending
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    c.location > last + refractory
                        && c.location + refractory <= candidate.location
                        && c.integrated > int_levels.threshold2()
                        && c.filtered > filt_levels.threshold2()
                })
                .max_by(|a, b| a.1.integrated.total_cmp(&b.1.integrated).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i);
            let Some(i) = best else { break };
            let found = pending.remove(i);
            int_levels.signal = 0.25 * found.integrated + 0.75 * int_levels.signal;
            filt_levels.signal = 0.25 * found.filtered + 0.75 * filt_levels.signal;
            accept(&mut beats, &mut rr_recent, found.location);
            pending.retain(|c| c.index > found.index);
        }

        let clear_of_refractory = beats.last().is_none_or(|&last| location >= last + refractory);
        if candidate.integrated > int_levels.threshold1()
            && candidate.filtered > filt_levels.threshold1()
            && clear_of_refractory
        {
            int_levels.signal = 0.125 * candidate.integrated + 0.875 * int_levels.signal;
            filt_levels.signal = 0.125 * candidate.filtered + 0.875 * filt_levels.signal;
            accept(&mut beats, &mut rr_recent, location);
            pending.clear();
        } else {
            int_levels.noise = 0.125 * candidate.integrated + 0.875 * int_levels.noise;
            filt_levels.noise = 0.125 * candidate.filtered.abs() + 0.875 * filt_levels.noise;
            pending.push(candidate);
        }
    }

    Ok(BeatTimes {
        times_s: beats.into_iter().map(|i| i as f64 / fs).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{bandpass, FilterSpec};
    use crate::ingest::{synth_ecg, SynthEcgConfig};

    fn filtered_synth(beats: Vec<f64>, duration: f64, noise: f64, seed: u64) -> EcgRecord {
        let mut cfg = SynthEcgConfig::new(duration, 200.0, beats);
        cfg.noise_amplitude_mv = noise;
        cfg.seed = seed;
        bandpass(&synth_ecg(&cfg).unwrap(), &FilterSpec::default()).unwrap()
    }

    fn alternating_beats(duration: f64) -> Vec<f64> {
        let mut t = 0.5;
        let mut out = Vec::new();
        let mut k = 0;
        while t < duration - 0.5 {
            out.push(t);
            t += if k % 2 == 0 { 0.8 } else { 1.0 };
            k += 1;
        }
        out
    }

    #[test]
    fn flat_signal_has_no_beats() {
        let rec = EcgRecord {
            record_id: "z".into(),
            sampling_rate_hz: 200.0,
            samples: vec![0.0; 12_000],
            annotations: vec![],
        };
        assert!(detect_r_peaks(&rec).unwrap().is_empty());
    }

    #[test]
    fn short_record_is_an_error() {
        let rec = EcgRecord {
            record_id: "s".into(),
            sampling_rate_hz: 200.0,
            samples: vec![0.0; 300],
            annotations: vec![],
        };
        assert!(matches!(detect_r_peaks(&rec), Err(QrsError::TooShort { .. })));
    }

    #[test]
    fn finds_every_clean_beat() {
        let truth: Vec<f64> = (0..60).map(|k| f64::from(k) + 0.5).collect();
        let rec = filtered_synth(truth.clone(), 60.0, 0.0, 0);
        let found = detect_r_peaks(&rec).unwrap();
        assert_eq!(found.len(), 60, "{:?}", found.times_s);
        for (f, t) in found.times_s.iter().zip(&truth) {
            assert!((f - t).abs() <= 0.010, "{f} vs {t}");
        }
    }

    #[test]
    fn recovers_alternating_rr_under_noise() {
        let truth = alternating_beats(120.0);
        let rec = filtered_synth(truth.clone(), 120.0, 0.1, 7);
        let found = detect_r_peaks(&rec).unwrap().times_s;
        assert!(found.len() as f64 >= 0.98 * truth.len() as f64);
        assert_eq!(found.len(), truth.len());
        for (f, t) in found.windows(2).zip(truth.windows(2)) {
            let (rr_found, rr_true) = (f[1] - f[0], t[1] - t[0]);
            assert!((rr_found - rr_true).abs() <= 0.015);
        }
    }

    #[test]
    fn amplitude_scaling_does_not_move_peaks() {
        let rec = filtered_synth(alternating_beats(60.0), 60.0, 0.15, 11);
        let base = detect_r_peaks(&rec).unwrap();
        for k in [0.001, 0.37, 2.0, 15.5, 1000.0] {
            let scaled = rec.with_samples(rec.samples.iter().map(|v| v * k).collect(), rec.sampling_rate_hz);
            assert_eq!(detect_r_peaks(&scaled).unwrap(), base, "k = {k}");
        }
    }

    #[test]
    fn search_back_recovers_a_weak_beat() {
        let truth: Vec<f64> = (1..40).map(|k| k as f64 * 0.9).collect();
        let mut cfg = SynthEcgConfig::new(37.0, 200.0, truth.clone());
        cfg.seed = 1;
        let mut raw = synth_ecg(&cfg).unwrap();
        // shrink beat 20 so it falls between the primary and secondary thresholds
        let center = (truth[20] * 200.0).round() as usize;
        for s in &mut raw.samples[center - 10..=center + 10] {
            *s *= 0.42;
        }
        let rec = bandpass(&raw, &FilterSpec::default()).unwrap();
        let found = detect_r_peaks(&rec).unwrap().times_s;
        assert!(
            found.iter().any(|f| (f - truth[20]).abs() < 0.01),
            "weak beat at {} missing",
            truth[20]
        );
        let no_search_back = PanTompkinsConfig {
            search_back_factor: f64::INFINITY,
            ..PanTompkinsConfig::default()
        };
        let found = detect_r_peaks_with(&rec, &no_search_back).unwrap().times_s;
        assert!(!found.iter().any(|f| (f - truth[20]).abs() < 0.01));
    }

    #[test]
    fn output_respects_refractory_period() {
        let rec = filtered_synth(alternating_beats(60.0), 60.0, 0.3, 5);
        let found = detect_r_peaks(&rec).unwrap().times_s;
        for w in found.windows(2) {
            assert!(w[1] - w[0] >= 0.2 - 1e-12);
        }
        assert!(found.iter().all(|&t| (0.0..=60.0).contains(&t)));
    }

    #[test]
    fn moving_average_is_centered() {
        let mut x = vec![0.0; 21];
        x[10] = 1.0;
        let y = moving_window_integration(&x, 5);
        let argmax = (0..21).fold(0, |b, i| if y[i] > y[b] { i } else { b });
        assert_eq!(y.iter().filter(|&&v| v > 0.0).count(), 5);
        assert!((8..=12).contains(&argmax));
    }
}
