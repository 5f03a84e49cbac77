//! Sliding-window segmentation of RR series and feature matrix assembly.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hrv::{self, FreqFeatures, HrvError, PoincareFeatures, RrSeries, StatFeatures};
use crate::ingest::{AnnotationSpan, StressLabel};

/// Fewest usable windows a matrix may have before it is considered degenerate.
pub const MIN_USABLE_WINDOWS: usize = 20;
/// Fraction of a window that must be annotated for it to receive a label.
pub const MIN_LABEL_COVERAGE: f64 = 0.5;
pub const MAX_OVERLAP_PCT: u32 = 95;

#[derive(Debug, Error, PartialEq)]
pub enum WindowingError {
    #[error("invalid window parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate feature matrix: {rows} usable windows, {classes} classes ({dropped} dropped)")]
    Degenerate {
        rows: usize,
        classes: usize,
        dropped: usize,
    },
    #[error("no RR data")]
    Empty,
    #[error("i/o error: {0}")]
    Io(String),
}

/// The two windowing hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowParams {
    pub window_size_s: u32,
    pub overlap_pct: u32,
}

impl WindowParams {
    pub fn new(window_size_s: u32, overlap_pct: u32) -> Self {
        Self {
            window_size_s,
            overlap_pct,
        }
    }

    /// Hop between window starts: `window × (1 − overlap)`, rounded down to
    /// whole seconds, never below 1 s.
    pub fn step_s(&self) -> u32 {
        (self.window_size_s * (100 - self.overlap_pct.min(100)) / 100).max(1)
    }

    pub fn validate(&self) -> Result<(), WindowingError> {
        if self.window_size_s == 0 {
            return Err(WindowingError::InvalidParams("window size must be positive".into()));
        }
        if self.overlap_pct > MAX_OVERLAP_PCT {
            return Err(WindowingError::InvalidParams(format!(
                "overlap {}% exceeds {MAX_OVERLAP_PCT}%",
                self.overlap_pct
            )));
        }
        Ok(())
    }
}

impl fmt::Display for WindowParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} s / {}%", self.window_size_s, self.overlap_pct)
    }
}

/// Integer search box for the windowing hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowBounds {
    pub window_min_s: u32,
    pub window_max_s: u32,
    pub overlap_min_pct: u32,
    pub overlap_max_pct: u32,
}

impl WindowBounds {
    /// Real-driving recordings: windows of 5–520 s.
    pub const DRIVEDB: WindowBounds = WindowBounds {
        window_min_s: 5,
        window_max_s: 520,
        overlap_min_pct: 0,
        overlap_max_pct: 95,
    };

    /// Simulator sessions annotated every minute: windows of 5–60 s.
    pub const SIMULATOR: WindowBounds = WindowBounds {
        window_min_s: 5,
        window_max_s: 60,
        overlap_min_pct: 0,
        overlap_max_pct: 95,
    };

    pub fn contains(&self, p: WindowParams) -> bool {
        (self.window_min_s..=self.window_max_s).contains(&p.window_size_s)
            && (self.overlap_min_pct..=self.overlap_max_pct).contains(&p.overlap_pct)
    }

    /// Number of integer grid points in the box.
    pub fn grid_size(&self) -> usize {
        ((self.window_max_s - self.window_min_s + 1) * (self.overlap_max_pct - self.overlap_min_pct + 1)) as usize
    }

    pub fn validate(&self) -> Result<(), WindowingError> {
        if self.window_min_s == 0 || self.window_min_s >= self.window_max_s {
            return Err(WindowingError::InvalidParams(format!(
                "window bounds [{}, {}] invalid",
                self.window_min_s, self.window_max_s
            )));
        }
        if self.overlap_min_pct >= self.overlap_max_pct || self.overlap_max_pct > MAX_OVERLAP_PCT {
            return Err(WindowingError::InvalidParams(format!(
                "overlap bounds [{}, {}] invalid",
                self.overlap_min_pct, self.overlap_max_pct
            )));
        }
        Ok(())
    }
}

/// Window spans `[k·step, k·step + window)` that fit inside the record.
pub fn segment(record_duration_s: f64, params: WindowParams) -> Vec<(f64, f64)> {
    let window = params.window_size_s as f64;
    if window > record_duration_s {
        log::warn!(
            "window {} s exceeds record duration {record_duration_s:.1} s; no windows",
            params.window_size_s
        );
        return Vec::new();
    }
    let step = params.step_s() as f64;
    let count = ((record_duration_s - window) / step).floor() as usize + 1;
    (0..count)
        .map(|k| {
            let start = k as f64 * step;
            (start, start + window)
        })
        .collect()
}

/// Label with the largest overlap with `span`, ties going to the higher
/// stress level. `None` when less than half the span is annotated.
pub fn label_window(span: (f64, f64), annotations: &[AnnotationSpan]) -> Option<StressLabel> {
    let (start, end) = span;
    let length = end - start;
    let mut covered = 0.0;
    let mut best: Option<(f64, StressLabel)> = None;
    for a in annotations {
        let overlap = a.overlap_with(start, end);
        if overlap <= 0.0 {
            continue;
        }
        covered += overlap;
        best = match best {
            Some((o, l)) if o > overlap || (o == overlap && l >= a.label) => Some((o, l)),
            _ => Some((overlap, a.label)),
        };
    }
    if covered < MIN_LABEL_COVERAGE * length {
        return None;
    }
    best.map(|(_, label)| label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Statistical,
    Nonlinear,
    Frequency,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Statistical, FeatureSet::Nonlinear, FeatureSet::Frequency];

    pub fn schema(self) -> &'static [&'static str] {
        match self {
            FeatureSet::Statistical => &StatFeatures::NAMES,
            FeatureSet::Nonlinear => &PoincareFeatures::NAMES,
            FeatureSet::Frequency => &FreqFeatures::NAMES,
        }
    }

    /// Computes this feature set on an RR slice and its closing-beat times.
    pub fn extract(self, rr: &[f64], times_s: &[f64]) -> Result<Vec<f64>, HrvError> {
        Ok(match self {
            FeatureSet::Statistical => hrv::stat_features(rr)?.to_vec(),
            FeatureSet::Nonlinear => hrv::poincare_features(rr)?.to_vec(),
            FeatureSet::Frequency => hrv::freq_features(rr, times_s)?.to_vec(),
        })
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::Statistical => "statistical",
            FeatureSet::Nonlinear => "nonlinear",
            FeatureSet::Frequency => "frequency",
        })
    }
}

impl FromStr for FeatureSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "statistical" => Ok(FeatureSet::Statistical),
            "nonlinear" | "non-linear" => Ok(FeatureSet::Nonlinear),
            "frequency" => Ok(FeatureSet::Frequency),
            other => Err(format!("unknown feature set {other:?}")),
        }
    }
}

/// RR data of one recording together with its duration and annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRr {
    pub record_id: String,
    pub duration_s: f64,
    pub rr: RrSeries,
    pub annotations: Vec<AnnotationSpan>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start_s: f64,
    pub end_s: f64,
    /// Indices into the record's RR series.
    pub rr_range: Range<usize>,
    pub label: StressLabel,
}

/// Labeled windows of one record.
pub fn windows(record: &LabeledRr, params: WindowParams) -> Vec<Window> {
    segment(record.duration_s, params)
        .into_iter()
        .filter_map(|(start_s, end_s)| {
            let label = label_window((start_s, end_s), &record.annotations)?;
            Some(Window {
                start_s,
                end_s,
                rr_range: record.rr.slice_range(start_s, end_s),
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub feature_set: FeatureSet,
    pub schema: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<StressLabel>,
    /// Labeled windows discarded for insufficient data or non-finite features.
    pub dropped_windows: usize,
    /// Windows discarded for lacking annotation coverage.
    pub unlabeled_windows: usize,
}

impl FeatureMatrix {
    pub fn new(feature_set: FeatureSet) -> Self {
        Self {
            feature_set,
            schema: feature_set.schema().iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            labels: Vec::new(),
            dropped_windows: 0,
            unlabeled_windows: 0,
        }
    }

    /// Builds a matrix from raw rows with a custom schema.
    pub fn from_rows(feature_set: FeatureSet, schema: Vec<String>, rows: Vec<Vec<f64>>, labels: Vec<StressLabel>) -> Self {
        assert_eq!(rows.len(), labels.len());
        Self {
            feature_set,
            schema,
            rows,
            labels,
            dropped_windows: 0,
            unlabeled_windows: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn classes(&self) -> BTreeSet<StressLabel> {
        self.labels.iter().copied().collect()
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for l in &self.labels {
            counts[l.index()] += 1;
        }
        counts
    }

    /// Errors unless the matrix can feed a classifier.
    pub fn check_usable(&self) -> Result<(), WindowingError> {
        let classes = self.classes().len();
        if self.len() < MIN_USABLE_WINDOWS || classes < 2 {
            return Err(WindowingError::Degenerate {
                rows: self.len(),
                classes,
                dropped: self.dropped_windows,
            });
        }
        Ok(())
    }

    /// Reads a matrix written by [`FeatureMatrix::write_csv`]: feature
    /// columns followed by a `label` column.
    pub fn read_csv(path: &Path, feature_set: FeatureSet) -> Result<Self, WindowingError> {
        let err = |m: String| WindowingError::Io(format!("{}: {m}", path.display()));
        let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| err(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let Some((last, schema)) = header.split_last() else {
            return Err(err("empty header".into()));
        };
        if last != "label" || schema.is_empty() {
            return Err(err("last column must be `label` after at least one feature".into()));
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| err(e.to_string()))?;
            let line = i + 2;
            let row = schema
                .iter()
                .enumerate()
                .map(|(c, name)| {
                    record[c]
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| err(format!("line {line}: `{name}` is not a number")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            labels.push(record[schema.len()].parse().map_err(|e| err(format!("line {line}: {e}")))?);
            rows.push(row);
        }
        Ok(Self::from_rows(feature_set, schema.to_vec(), rows, labels))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), WindowingError> {
        let io = |e: std::io::Error| WindowingError::Io(format!("{}: {e}", path.display()));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(out, "{},label", self.schema.join(",")).map_err(io)?;
        for (row, label) in self.rows.iter().zip(&self.labels) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", cells.join(","), label).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Segments every record, labels the windows and extracts features, pooling
/// all rows. Does not check degeneracy.
pub fn extract_matrix(records: &[LabeledRr], params: WindowParams, feature_set: FeatureSet) -> FeatureMatrix {
    let mut matrix = FeatureMatrix::new(feature_set);
    for record in records {
        let spans = segment(record.duration_s, params).len();
        let labeled = windows(record, params);
        matrix.unlabeled_windows += spans - labeled.len();
        for w in labeled {
            let rr = &record.rr.rr_ms[w.rr_range.clone()];
            let times = &record.rr.rr_end_s[w.rr_range.clone()];
            match feature_set.extract(rr, times) {
                Ok(row) if row.iter().all(|v| v.is_finite()) => {
                    matrix.rows.push(row);
                    matrix.labels.push(w.label);
                }
                _ => matrix.dropped_windows += 1,
            }
        }
    }
    matrix
}

/// Builds the pooled feature matrix for one windowing configuration.
pub fn build_matrix(
    records: &[LabeledRr],
    params: WindowParams,
    feature_set: FeatureSet,
) -> Result<FeatureMatrix, WindowingError> {
    params.validate()?;
    if records.iter().all(|r| r.rr.is_empty()) {
        return Err(WindowingError::Empty);
    }
    let matrix = extract_matrix(records, params, feature_set);
    matrix.check_usable()?;
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hrv::derive_rr;
    use crate::qrs::BeatTimes;
    use proptest::prelude::*;

    fn span(a: f64, b: f64, l: StressLabel) -> AnnotationSpan {
        AnnotationSpan::new(a, b, l)
    }

    fn constant_record(duration: f64, rr_s: f64, annotations: Vec<AnnotationSpan>) -> LabeledRr {
        let n = (duration / rr_s) as usize;
        let times: Vec<f64> = (0..=n).map(|k| k as f64 * rr_s).filter(|&t| t <= duration).collect();
        LabeledRr {
            record_id: "c".into(),
            duration_s: duration,
            rr: derive_rr(&BeatTimes { times_s: times }),
            annotations,
        }
    }

    #[test]
    fn step_rounding() {
        assert_eq!(WindowParams::new(10, 50).step_s(), 5);
        assert_eq!(WindowParams::new(10, 0).step_s(), 10);
        assert_eq!(WindowParams::new(5, 95).step_s(), 1);
        assert_eq!(WindowParams::new(7, 50).step_s(), 3);
        assert_eq!(WindowParams::new(480, 95).step_s(), 24);
    }

    #[test]
    fn segment_counts() {
        assert_eq!(segment(100.0, WindowParams::new(10, 50)).len(), 19);
        let tiles = segment(100.0, WindowParams::new(10, 0));
        assert_eq!(tiles.len(), 10);
        assert_eq!(tiles[9], (90.0, 100.0));
        assert!(segment(60.0, WindowParams::new(520, 0)).is_empty());
        assert_eq!(segment(600.0, WindowParams::new(60, 50)).len(), 19);
    }

    #[test]
    fn labels_by_majority_overlap() {
        use StressLabel::*;
        let ann = vec![span(0.0, 100.0, Low)];
        assert_eq!(label_window((10.0, 20.0), &ann), Some(Low));

        let ann = vec![span(0.0, 15.0, Medium), span(15.0, 30.0, High)];
        assert_eq!(label_window((10.0, 20.0), &ann), Some(High));

        let ann = vec![span(0.0, 14.0, Medium)];
        assert_eq!(label_window((10.0, 20.0), &ann), None);

        let ann = vec![span(0.0, 13.0, High), span(13.0, 20.0, Low)];
        assert_eq!(label_window((10.0, 20.0), &ann), Some(Low));
    }

    #[test]
    fn constant_rr_rows_have_zero_variability() {
        let rec = constant_record(600.0, 0.8, vec![span(0.0, 300.0, StressLabel::Low), span(300.0, 600.0, StressLabel::High)]);
        let m = build_matrix(&[rec], WindowParams::new(30, 50), FeatureSet::Statistical).unwrap();
        assert!(m.len() >= MIN_USABLE_WINDOWS);
        for row in &m.rows {
            assert!(row[3].abs() < 1e-9);
            assert!(row[4].abs() < 1e-9);
        }
        assert_eq!(m.n_features(), 8);
    }

    #[test]
    fn short_windows_starve_frequency_features() {
        let rec = constant_record(600.0, 0.8, vec![span(0.0, 300.0, StressLabel::Low), span(300.0, 600.0, StressLabel::High)]);
        let err = build_matrix(&[rec.clone()], WindowParams::new(10, 50), FeatureSet::Frequency).unwrap_err();
        assert!(matches!(err, WindowingError::Degenerate { rows: 0, .. }));
        let m = extract_matrix(&[rec], WindowParams::new(10, 50), FeatureSet::Frequency);
        assert_eq!(m.dropped_windows, 119);
    }

    #[test]
    fn single_label_is_degenerate() {
        let rec = constant_record(600.0, 0.8, vec![span(0.0, 600.0, StressLabel::Low)]);
        assert!(matches!(
            build_matrix(&[rec], WindowParams::new(20, 0), FeatureSet::Statistical),
            Err(WindowingError::Degenerate { classes: 1, .. })
        ));
    }

    #[test]
    fn slices_hold_beats_inside_span() {
        let rec = constant_record(100.0, 1.0, vec![span(0.0, 100.0, StressLabel::Low)]);
        for w in windows(&rec, WindowParams::new(10, 30)) {
            for i in w.rr_range.clone() {
                assert!(rec.rr.rr_start_s(i) >= w.start_s);
                assert!(rec.rr.rr_end_s[i] < w.end_s);
            }
            assert_eq!(w.end_s - w.start_s, 10.0);
        }
    }

    #[test]
    fn csv_export_has_schema_header() {
        let dir = tempfile::tempdir().unwrap();
        let rec = constant_record(600.0, 0.8, vec![span(0.0, 300.0, StressLabel::Low), span(300.0, 600.0, StressLabel::High)]);
        let m = build_matrix(&[rec], WindowParams::new(30, 0), FeatureSet::Nonlinear).unwrap();
        let path = dir.path().join("m.csv");
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "sd1_ms,sd2_ms,sd1_sd2_ratio,label");
        assert_eq!(lines.count(), m.len());
    }

    proptest! {
        #[test]
        fn rows_match_direct_recomputation(window in 5u32..80, overlap in 0u32..=95, seed in 0u64..50) {
            let times: Vec<f64> = (0..700).scan(0.0, |t, k| { *t += 0.7 + 0.2 * ((k as f64 * 0.37 + seed as f64).sin()); Some(*t) }).collect();
            let duration = times[times.len() - 1] + 0.5;
            let rec = LabeledRr {
                record_id: "p".into(),
                duration_s: duration,
                rr: derive_rr(&BeatTimes { times_s: times }),
                annotations: vec![span(0.0, duration / 2.0, StressLabel::Low), span(duration / 2.0, duration, StressLabel::Medium)],
            };
            let params = WindowParams::new(window, overlap);
            let m = extract_matrix(std::slice::from_ref(&rec), params, FeatureSet::Statistical);
            let ws: Vec<Window> = windows(&rec, params)
                .into_iter()
                .filter(|w| w.rr_range.len() >= 2)
                .collect();
            prop_assert_eq!(ws.len(), m.len());
            for (w, row) in ws.iter().zip(&m.rows) {
                let direct = hrv::stat_features(&rec.rr.rr_ms[w.rr_range.clone()]).unwrap().to_vec();
                prop_assert_eq!(&direct, row);
            }
        }

        #[test]
        fn zero_overlap_tiles_prefix(duration in 1.0f64..2000.0, window in 1u32..600) {
            let spans = segment(duration, WindowParams::new(window, 0));
            for (k, (a, b)) in spans.iter().enumerate() {
                prop_assert_eq!(*a, (k as u32 * window) as f64);
                prop_assert_eq!(*b - *a, window as f64);
            }
            if let Some(last) = spans.last() {
                prop_assert!(duration - last.1 < window as f64);
            }
        }
    }
}
