//! ECG record loading and synthetic ECG generation.
//!
//! On-disk layout for one record `<id>`:
//!
//! * `<id>.csv`: header `time_s,ecg_mv`, strictly increasing time.
//! * `<id>.json`: sidecar manifest `{ "record_id": ..., "sampling_rate_hz": ... }`.
//! * annotation CSV: header `start_s,end_s,label`, label in `{1, 2, 3}`.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the synthetic QRS pulse.
pub const SYNTH_PULSE_WIDTH_S: f64 = 0.080;
/// Smallest beat spacing `synth_ecg` accepts.
pub const SYNTH_MIN_BEAT_SPACING_S: f64 = 0.25;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("validation failed: {0}")]
    Validation(String),
}

/// Three-level driver stress annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StressLabel {
    Low,
    Medium,
    High,
}

impl StressLabel {
    pub const ALL: [StressLabel; 3] = [StressLabel::Low, StressLabel::Medium, StressLabel::High];

    /// Zero-based class index (Low = 0).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Maps the 1..=3 questionnaire code used in annotation files.
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(StressLabel::Low),
            2 => Some(StressLabel::Medium),
            3 => Some(StressLabel::High),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8 + 1
    }
}

impl fmt::Display for StressLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StressLabel::Low => "low",
            StressLabel::Medium => "medium",
            StressLabel::High => "high",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for StressLabel {
    type Err = String;

    /// Accepts the lowercase name or the numeric code.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        StressLabel::ALL
            .into_iter()
            .find(|l| l.to_string().eq_ignore_ascii_case(s) || l.code().to_string() == s)
            .ok_or_else(|| format!("unknown stress label {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSpan {
    pub start_s: f64,
    pub end_s: f64,
    pub label: StressLabel,
}

impl AnnotationSpan {
    pub fn new(start_s: f64, end_s: f64, label: StressLabel) -> Self {
        Self {
            start_s,
            end_s,
            label,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Length of the intersection with `[start_s, end_s)`.
    pub fn overlap_with(&self, start_s: f64, end_s: f64) -> f64 {
        (self.end_s.min(end_s) - self.start_s.max(start_s)).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRecord {
    pub record_id: String,
    pub sampling_rate_hz: f64,
    /// Amplitudes in millivolts.
    pub samples: Vec<f64>,
    pub annotations: Vec<AnnotationSpan>,
}

impl EcgRecord {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_rate_hz
    }

    /// Copy of this record with different samples/rate and the same metadata.
    pub fn with_samples(&self, samples: Vec<f64>, sampling_rate_hz: f64) -> Self {
        Self {
            record_id: self.record_id.clone(),
            sampling_rate_hz,
            samples,
            annotations: self.annotations.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if !(self.sampling_rate_hz > 0.0 && self.sampling_rate_hz.is_finite()) {
            return Err(IngestError::Validation(format!(
                "sampling rate must be positive, got {}",
                self.sampling_rate_hz
            )));
        }
        if self.samples.is_empty() {
            return Err(IngestError::Validation(format!(
                "record {} has no samples",
                self.record_id
            )));
        }
        validate_annotations(&self.annotations, self.duration_s())
    }
}

/// Checks span ordering, non-overlap and containment in `[0, duration_s]`.
pub fn validate_annotations(spans: &[AnnotationSpan], duration_s: f64) -> Result<(), IngestError> {
    // Half a sample of slack for durations derived from sample counts.
    let tol = 1e-9 * duration_s.max(1.0);
    for span in spans {
        if !(span.start_s < span.end_s) {
            return Err(IngestError::Validation(format!(
                "annotation span [{}, {}) is empty or reversed",
                span.start_s, span.end_s
            )));
        }
        if span.start_s < -tol || span.end_s > duration_s + tol {
            return Err(IngestError::Validation(format!(
                "annotation span [{}, {}) lies outside record duration {duration_s} s",
                span.start_s, span.end_s
            )));
        }
    }
    let mut sorted: Vec<&AnnotationSpan> = spans.iter().collect();
    sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    for pair in sorted.windows(2) {
        if pair[1].start_s < pair[0].end_s {
            return Err(IngestError::Validation(format!(
                "annotation spans [{}, {}) and [{}, {}) overlap",
                pair[0].start_s, pair[0].end_s, pair[1].start_s, pair[1].end_s
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordManifest {
    pub record_id: String,
    pub sampling_rate_hz: f64,
}

/// Sidecar manifest path for an ECG CSV (`rec.csv` -> `rec.json`).
pub fn manifest_path_for(ecg_path: &Path) -> PathBuf {
    ecg_path.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_line(err: &csv::Error) -> u64 {
    err.position().map(|p| p.line()).unwrap_or(0)
}

pub fn read_manifest(path: &Path) -> Result<RecordManifest, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let manifest: RecordManifest =
        serde_json::from_reader(BufReader::new(file)).map_err(|e| IngestError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if !(manifest.sampling_rate_hz > 0.0 && manifest.sampling_rate_hz.is_finite()) {
        return Err(IngestError::Manifest {
            path: path.to_path_buf(),
            message: format!("sampling_rate_hz must be positive, got {}", manifest.sampling_rate_hz),
        });
    }
    Ok(manifest)
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>, IngestError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| IngestError::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(IngestError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }
    Ok(reader)
}

fn parse_field(path: &Path, line: u64, value: Option<&str>, name: &str) -> Result<f64, IngestError> {
    let raw = value.ok_or_else(|| IngestError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("missing field `{name}`"),
    })?;
    let v: f64 = raw.parse().map_err(|_| IngestError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("field `{name}` is not a number: {raw:?}"),
    })?;
    if !v.is_finite() {
        return Err(IngestError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("field `{name}` is not finite"),
        });
    }
    Ok(v)
}

/// Reads `time_s,ecg_mv` rows. Returns (times, samples).
pub fn read_ecg_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>), IngestError> {
    let mut reader = open_csv(path, &["time_s", "ecg_mv"])?;
    let mut times = Vec::new();
    let mut samples = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::Parse {
            path: path.to_path_buf(),
            line: csv_line(&e),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 2 {
            return Err(IngestError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 2 fields, found {}", row.len()),
            });
        }
        let t = parse_field(path, line, row.get(0), "time_s")?;
        let v = parse_field(path, line, row.get(1), "ecg_mv")?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(IngestError::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("time {t} is not strictly after {prev}"),
                });
            }
        }
        times.push(t);
        samples.push(v);
    }
    Ok((times, samples))
}

pub fn read_annotations_csv(path: &Path) -> Result<Vec<AnnotationSpan>, IngestError> {
    let mut reader = open_csv(path, &["start_s", "end_s", "label"])?;
    let mut spans = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| IngestError::Parse {
            path: path.to_path_buf(),
            line: csv_line(&e),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let start_s = parse_field(path, line, row.get(0), "start_s")?;
        let end_s = parse_field(path, line, row.get(1), "end_s")?;
        let raw = row.get(2).unwrap_or("");
        let label = raw
            .parse::<u8>()
            .ok()
            .and_then(StressLabel::from_code)
            .ok_or_else(|| IngestError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("label must be 1, 2 or 3, got {raw:?}"),
            })?;
        spans.push(AnnotationSpan {
            start_s,
            end_s,
            label,
        });
    }
    Ok(spans)
}

/// Loads an ECG CSV, its sidecar manifest and an annotation CSV.
pub fn load_record(ecg_path: &Path, annotation_path: &Path) -> Result<EcgRecord, IngestError> {
    let manifest = read_manifest(&manifest_path_for(ecg_path))?;
    let (_, samples) = read_ecg_csv(ecg_path)?;
    let annotations = read_annotations_csv(annotation_path)?;
    let record = EcgRecord {
        record_id: manifest.record_id,
        sampling_rate_hz: manifest.sampling_rate_hz,
        samples,
        annotations,
    };
    record.validate()?;
    Ok(record)
}

/// Writes the ECG CSV and its sidecar manifest. Values use `precision`
/// decimal places.
pub fn write_ecg_csv(record: &EcgRecord, ecg_path: &Path, precision: usize) -> Result<(), IngestError> {
    let file = File::create(ecg_path).map_err(io_err(ecg_path))?;
    let mut out = std::io::BufWriter::new(file);
    let fs = record.sampling_rate_hz;
    let write = |out: &mut std::io::BufWriter<File>| -> std::io::Result<()> {
        writeln!(out, "time_s,ecg_mv")?;
        for (i, v) in record.samples.iter().enumerate() {
            writeln!(out, "{:.6},{:.*}", i as f64 / fs, precision, v)?;
        }
        out.flush()
    };
    write(&mut out).map_err(io_err(ecg_path))?;

    let manifest = RecordManifest {
        record_id: record.record_id.clone(),
        sampling_rate_hz: record.sampling_rate_hz,
    };
    let manifest_path = manifest_path_for(ecg_path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))
}

pub fn write_annotations_csv(spans: &[AnnotationSpan], path: &Path) -> Result<(), IngestError> {
    let mut body = String::from("start_s,end_s,label\n");
    for span in spans {
        body.push_str(&format!("{},{},{}\n", span.start_s, span.end_s, span.label.code()));
    }
    std::fs::write(path, body).map_err(io_err(path))
}

/// Ground-truth description of a synthetic ECG trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthEcgConfig {
    pub record_id: String,
    pub duration_s: f64,
    pub sampling_rate_hz: f64,
    /// R-peak times, strictly increasing.
    pub beat_times_s: Vec<f64>,
    /// Standard deviation of the additive Gaussian noise (pulse peak is 1 mV).
    pub noise_amplitude_mv: f64,
    pub seed: u64,
    pub annotations: Vec<AnnotationSpan>,
}

impl SynthEcgConfig {
    pub fn new(duration_s: f64, sampling_rate_hz: f64, beat_times_s: Vec<f64>) -> Self {
        Self {
            record_id: "synthetic".to_string(),
            duration_s,
            sampling_rate_hz,
            beat_times_s,
            noise_amplitude_mv: 0.0,
            seed: 0,
            annotations: Vec::new(),
        }
    }
}

/// Raised-cosine QRS pulse of unit height and width [`SYNTH_PULSE_WIDTH_S`].
pub fn qrs_pulse(offset_s: f64) -> f64 {
    let half = SYNTH_PULSE_WIDTH_S / 2.0;
    if offset_s.abs() >= half {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * offset_s / half).cos())
    }
}

/// Generates an ECG-like trace with one unit pulse per beat plus seeded
/// Gaussian noise.
pub fn synth_ecg(config: &SynthEcgConfig) -> Result<EcgRecord, IngestError> {
    if !(config.sampling_rate_hz > 0.0) || !(config.duration_s > 0.0) {
        return Err(IngestError::Validation(
            "duration and sampling rate must be positive".into(),
        ));
    }
    if !(config.noise_amplitude_mv >= 0.0) {
        return Err(IngestError::Validation("noise amplitude must be nonnegative".into()));
    }
    for &t in &config.beat_times_s {
        if !(0.0..=config.duration_s).contains(&t) {
            return Err(IngestError::Validation(format!(
                "beat time {t} outside [0, {}]",
                config.duration_s
            )));
        }
    }
    for pair in config.beat_times_s.windows(2) {
        let gap = pair[1] - pair[0];
        if gap <= 0.0 {
            return Err(IngestError::Validation("beat times must be strictly increasing".into()));
        }
        if gap < SYNTH_MIN_BEAT_SPACING_S {
            return Err(IngestError::Validation(format!(
                "beat spacing {gap:.3} s at t = {} s is below {SYNTH_MIN_BEAT_SPACING_S} s",
                pair[0]
            )));
        }
    }

    let fs = config.sampling_rate_hz;
    let n = (config.duration_s * fs).round() as usize;
    let mut samples = vec![0.0; n];
    let half = SYNTH_PULSE_WIDTH_S / 2.0;
    for &beat in &config.beat_times_s {
        let first = ((beat - half) * fs).floor().max(0.0) as usize;
        let last = (((beat + half) * fs).ceil() as usize).min(n.saturating_sub(1));
        for (i, s) in samples.iter_mut().enumerate().take(last + 1).skip(first) {
            *s += qrs_pulse(i as f64 / fs - beat);
        }
    }
    if config.noise_amplitude_mv > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.noise_amplitude_mv).expect("finite std");
        for s in samples.iter_mut() {
            *s += normal.sample(&mut rng);
        }
    }
    let record = EcgRecord {
        record_id: config.record_id.clone(),
        sampling_rate_hz: fs,
        samples,
        annotations: config.annotations.clone(),
    };
    validate_annotations(&record.annotations, record.duration_s())?;
    Ok(record)
}
