//! Synthetic labeled corpora.
//!
//! Each record is a sequence of labeled segments. The stress level sets the
//! mean RR interval and the amplitude of a 0.1 Hz (LF band) oscillation of
//! the tachogram; a smaller respiratory (HF band) oscillation and Gaussian
//! jitter are added on top.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::hrv::derive_rr;
use crate::ingest::{synth_ecg, AnnotationSpan, EcgRecord, IngestError, StressLabel, SynthEcgConfig};
use crate::qrs::BeatTimes;
use crate::windowing::LabeledRr;

/// Mean RR interval per stress level (low, medium, high).
pub const CLASS_RR_MEAN_MS: [f64; 3] = [1000.0, 850.0, 700.0];
pub const LF_FREQ_HZ: f64 = 0.1;
pub const HF_FREQ_HZ: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_records: usize,
    /// Labeled segments per record; classes are dealt evenly, then shuffled.
    pub segments_per_record: usize,
    pub segment_s: f64,
    pub sampling_rate_hz: f64,
    /// Gaussian ECG noise standard deviation relative to the unit pulse.
    pub noise_amplitude_mv: f64,
    /// LF oscillation amplitude per stress level.
    pub lf_amplitude_ms: [f64; 3],
    pub hf_amplitude_ms: f64,
    pub jitter_ms: f64,
    /// Standard deviation of a per-record offset of the RR mean.
    pub record_offset_ms: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_records: 6,
            segments_per_record: 6,
            segment_s: 240.0,
            sampling_rate_hz: 250.0,
            noise_amplitude_mv: 0.05,
            lf_amplitude_ms: [30.0, 52.5, 75.0],
            hf_amplitude_ms: 15.0,
            jitter_ms: 50.0,
            record_offset_ms: 60.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub record_id: String,
    pub duration_s: f64,
    pub beat_times_s: Vec<f64>,
    pub annotations: Vec<AnnotationSpan>,
}

impl SynthRecord {
    pub fn ecg(&self, config: &CorpusConfig, index: usize) -> Result<EcgRecord, IngestError> {
        synth_ecg(&SynthEcgConfig {
            record_id: self.record_id.clone(),
            duration_s: self.duration_s,
            sampling_rate_hz: config.sampling_rate_hz,
            beat_times_s: self.beat_times_s.clone(),
            noise_amplitude_mv: config.noise_amplitude_mv,
            seed: config.seed.wrapping_add(index as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
            annotations: self.annotations.clone(),
        })
    }

    /// Ground-truth RR series, skipping beat detection.
    pub fn labeled_rr(&self) -> LabeledRr {
        LabeledRr {
            record_id: self.record_id.clone(),
            duration_s: self.duration_s,
            rr: derive_rr(&BeatTimes {
                times_s: self.beat_times_s.clone(),
            }),
            annotations: self.annotations.clone(),
        }
    }
}

fn label_at(annotations: &[AnnotationSpan], t: f64) -> StressLabel {
    annotations
        .iter()
        .find(|a| t >= a.start_s && t < a.end_s)
        .or(annotations.last())
        .map(|a| a.label)
        .unwrap_or(StressLabel::Low)
}

pub fn generate_record(config: &CorpusConfig, index: usize) -> SynthRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);

    let mut labels: Vec<StressLabel> = (0..config.segments_per_record)
        .map(|k| StressLabel::ALL[k % 3])
        .collect();
    labels.shuffle(&mut rng);
    let annotations: Vec<AnnotationSpan> = labels
        .iter()
        .enumerate()
        .map(|(k, &label)| AnnotationSpan::new(k as f64 * config.segment_s, (k + 1) as f64 * config.segment_s, label))
        .collect();
    let duration_s = config.segments_per_record as f64 * config.segment_s;

    let offset = config.record_offset_ms * rng.sample::<f64, _>(rand_distr::StandardNormal);
    let jitter = Normal::new(0.0, config.jitter_ms.max(0.0)).expect("finite jitter");
    let lf_phase = rng.random::<f64>() * std::f64::consts::TAU;
    let hf_phase = rng.random::<f64>() * std::f64::consts::TAU;

    let mut beat_times_s = Vec::new();
    let mut t = 0.5;
    while t < duration_s - 0.5 {
        beat_times_s.push(t);
        let label = label_at(&annotations, t);
        let rr_ms = CLASS_RR_MEAN_MS[label.index()]
            + offset
            + config.lf_amplitude_ms[label.index()] * (std::f64::consts::TAU * LF_FREQ_HZ * t + lf_phase).sin()
            + config.hf_amplitude_ms * (std::f64::consts::TAU * HF_FREQ_HZ * t + hf_phase).sin()
            + jitter.sample(&mut rng);
        t += rr_ms.clamp(400.0, 1600.0) / 1000.0;
    }

    SynthRecord {
        record_id: format!("synth{index:02}"),
        duration_s,
        beat_times_s,
        annotations,
    }
}

pub fn generate_corpus(config: &CorpusConfig) -> Vec<SynthRecord> {
    (0..config.n_records).map(|i| generate_record(config, i)).collect()
}
