//! Run configuration and subcommand implementations for the `hrvopt` binary.
//!
//! File layout inside a data directory:
//!
//! * `<id>.ecg.csv` + `<id>.ecg.json`: ECG samples and sidecar manifest.
//! * `<id>.ann.csv`: stress annotations.
//! * `<id>.rr.json`: RR series written by `preprocess`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hrvopt_core::dsp::{bandpass, resample, FilterSpec};
use hrvopt_core::forest::{cv_accuracy, FitnessResult, ForestParams, DEFAULT_FOLDS};
use hrvopt_core::hrv::{derive_rr, RrSeries};
use hrvopt_core::ingest::{load_record, write_annotations_csv, write_ecg_csv, AnnotationSpan};
use hrvopt_core::optimize::{
    pso_search, random_search, region_report, BinSpec, FitnessCache, RegionReport, SearchOutcome, SearchTrace,
    SwarmConfig, WindowingObjective,
};
use hrvopt_core::qrs::detect_r_peaks;
use hrvopt_core::synth::{generate_corpus, CorpusConfig};
use hrvopt_core::windowing::{FeatureMatrix, FeatureSet, LabeledRr, WindowBounds, WindowParams};

pub const ECG_SUFFIX: &str = ".ecg.csv";
pub const ANNOTATION_SUFFIX: &str = ".ann.csv";
pub const RR_SUFFIX: &str = ".rr.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Drivedb,
    Simulator,
}

impl Preset {
    pub fn bounds(self) -> WindowBounds {
        match self {
            Preset::Drivedb => WindowBounds::DRIVEDB,
            Preset::Simulator => WindowBounds::SIMULATOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Pso,
    Random,
}

/// Swarm settings exposed in the config; bounds and seed come from the
/// preset and the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwarmSettings {
    pub n_particles: usize,
    pub max_iterations: usize,
    pub c1: f64,
    pub c2: f64,
    pub inertia_start: f64,
    pub damping: f64,
    pub early_stop_accuracy: f64,
}

impl Default for SwarmSettings {
    fn default() -> Self {
        let d = SwarmConfig::default();
        Self {
            n_particles: d.n_particles,
            max_iterations: d.max_iterations,
            c1: d.c1,
            c2: d.c2,
            inertia_start: d.inertia_start,
            damping: d.damping,
            early_stop_accuracy: d.early_stop_accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Input ECG directory; defaults to `<out_dir>/ecg`.
    pub ecg_dir: Option<PathBuf>,
    /// RR directory written by `preprocess`; defaults to `<out_dir>/rr`.
    pub rr_dir: Option<PathBuf>,
    /// Band-pass settings; `target_rate_hz` is the working sampling rate.
    pub filter: FilterSpec,
    pub feature_set: FeatureSet,
    pub preset: Preset,
    pub optimizer: Optimizer,
    pub swarm: SwarmSettings,
    pub random_budget: usize,
    pub forest: ForestParams,
    pub folds: usize,
    pub corpus: CorpusConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ecg_dir: None,
            rr_dir: None,
            filter: FilterSpec::default(),
            feature_set: FeatureSet::Statistical,
            preset: Preset::Drivedb,
            optimizer: Optimizer::Pso,
            swarm: SwarmSettings::default(),
            random_budget: 150,
            forest: ForestParams::default(),
            folds: DEFAULT_FOLDS,
            corpus: CorpusConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub feature_set: Option<FeatureSet>,
    pub optimizer: Option<Optimizer>,
    pub preset: Option<Preset>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a config file or a manifest written by a previous run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let config = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(config).with_context(|| format!("invalid config in {}", path.display()))
    }

    /// Applies overrides and fills every path and seed, so the result fully
    /// determines a run.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(fs) = overrides.feature_set {
            self.feature_set = fs;
        }
        if let Some(o) = overrides.optimizer {
            self.optimizer = o;
        }
        if let Some(p) = overrides.preset {
            self.preset = p;
        }
        if let Some(out) = &overrides.out_dir {
            self.out_dir = out.clone();
        }
        self.ecg_dir.get_or_insert_with(|| self.out_dir.join("ecg"));
        self.rr_dir.get_or_insert_with(|| self.out_dir.join("rr"));
        self.forest.seed = self.seed;
        self.corpus.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.preset.bounds().validate()?;
        self.filter.validate_for_rate(self.filter.target_rate_hz)?;
        if self.random_budget == 0 {
            bail!("random_budget must be at least 1");
        }
        if self.folds < 2 {
            bail!("folds must be at least 2");
        }
        self.swarm_config().validate()?;
        Ok(())
    }

    pub fn swarm_config(&self) -> SwarmConfig {
        let s = &self.swarm;
        SwarmConfig {
            n_particles: s.n_particles,
            max_iterations: s.max_iterations,
            c1: s.c1,
            c2: s.c2,
            inertia_start: s.inertia_start,
            damping: s.damping,
            early_stop_accuracy: s.early_stop_accuracy,
            seed: self.seed,
            ..SwarmConfig::for_bounds(&self.preset.bounds())
        }
    }

    pub fn ecg_dir(&self) -> PathBuf {
        self.ecg_dir.clone().unwrap_or_else(|| self.out_dir.join("ecg"))
    }

    pub fn rr_dir(&self) -> PathBuf {
        self.rr_dir.clone().unwrap_or_else(|| self.out_dir.join("rr"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<WindowParams>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(config: &RunConfig, command: &str, point: Option<WindowParams>) -> Result<()> {
    fs::create_dir_all(&config.out_dir).with_context(|| format!("creating {}", config.out_dir.display()))?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config: config.clone(),
        point,
    };
    write_json(&config.out_dir.join(MANIFEST_FILE), &manifest)
}

/// Files in `dir` ending in `suffix`, sorted by name.
fn list_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
        .collect();
    paths.sort();
    Ok(paths)
}

fn stem(path: &Path, suffix: &str) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name.strip_suffix(suffix).unwrap_or(name).to_string()
}

/// Persisted RR data of one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrFile {
    pub record_id: String,
    pub duration_s: f64,
    pub source_rate_hz: f64,
    pub working_rate_hz: f64,
    pub beats_detected: usize,
    pub rr: RrSeries,
    pub annotations: Vec<AnnotationSpan>,
}

impl RrFile {
    pub fn labeled(self) -> LabeledRr {
        LabeledRr {
            record_id: self.record_id,
            duration_s: self.duration_s,
            rr: self.rr,
            annotations: self.annotations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessEntry {
    pub record_id: String,
    pub ok: bool,
    pub beats_detected: usize,
    pub intervals: usize,
    pub intervals_rejected: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn preprocess_one(ecg_path: &Path, rr_dir: &Path, filter: &FilterSpec) -> Result<RrFile> {
    let id = stem(ecg_path, ECG_SUFFIX);
    let ann_path = ecg_path.with_file_name(format!("{id}{ANNOTATION_SUFFIX}"));
    let record = load_record(ecg_path, &ann_path)?;
    let working = resample(&record, filter.target_rate_hz)?;
    let filtered = bandpass(&working, filter)?;
    let beats = detect_r_peaks(&filtered)?;
    let rr = derive_rr(&beats);
    let file = RrFile {
        record_id: record.record_id.clone(),
        duration_s: record.duration_s(),
        source_rate_hz: record.sampling_rate_hz,
        working_rate_hz: filtered.sampling_rate_hz,
        beats_detected: beats.times_s.len(),
        rr,
        annotations: record.annotations,
    };
    write_json(&rr_dir.join(format!("{id}{RR_SUFFIX}")), &file)?;
    Ok(file)
}

/// Resample, filter, detect R-peaks and derive RR for every record.
pub fn cmd_preprocess(config: &RunConfig) -> Result<Vec<PreprocessEntry>> {
    let ecg_dir = config.ecg_dir();
    let rr_dir = config.rr_dir();
    let inputs = list_with_suffix(&ecg_dir, ECG_SUFFIX)?;
    if inputs.is_empty() {
        bail!("no `*{ECG_SUFFIX}` records in {}", ecg_dir.display());
    }
    prepare_out(config, "preprocess", None)?;
    fs::create_dir_all(&rr_dir).with_context(|| format!("creating {}", rr_dir.display()))?;

    let log: Vec<PreprocessEntry> = inputs
        .par_iter()
        .map(|path| match preprocess_one(path, &rr_dir, &config.filter) {
            Ok(f) => PreprocessEntry {
                record_id: f.record_id,
                ok: true,
                beats_detected: f.beats_detected,
                intervals: f.rr.len(),
                intervals_rejected: f.rr.rejected,
                error: None,
            },
            Err(e) => {
                log::warn!("{}: {e:#}", path.display());
                PreprocessEntry {
                    record_id: stem(path, ECG_SUFFIX),
                    ok: false,
                    beats_detected: 0,
                    intervals: 0,
                    intervals_rejected: 0,
                    error: Some(format!("{e:#}")),
                }
            }
        })
        .collect();
    write_json(&config.out_dir.join("preprocess_log.json"), &log)?;
    if log.iter().all(|e| !e.ok) {
        bail!("all {} records failed pre-processing", log.len());
    }
    Ok(log)
}

pub fn load_rr_dir(dir: &Path) -> Result<Vec<LabeledRr>> {
    let paths = list_with_suffix(dir, RR_SUFFIX).context("run `preprocess` first")?;
    if paths.is_empty() {
        bail!("no `*{RR_SUFFIX}` files in {}; run `preprocess` first", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file: RrFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok(file.labeled())
        })
        .collect()
}

fn objective_for(config: &RunConfig) -> Result<WindowingObjective> {
    let records = load_rr_dir(&config.rr_dir())?;
    let labels: std::collections::BTreeSet<_> = records
        .iter()
        .flat_map(|r| r.annotations.iter().map(|a| a.label))
        .collect();
    if labels.len() < 2 {
        bail!("degenerate dataset: annotations contain {} stress level(s), need at least 2", labels.len());
    }
    let mut objective = WindowingObjective::new(records, config.feature_set, config.forest)?;
    objective.folds = config.folds;
    Ok(objective)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestReport {
    pub optimizer: Optimizer,
    pub feature_set: FeatureSet,
    pub window_size_s: u32,
    pub overlap_pct: u32,
    pub accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub confusion: [[u64; 3]; 3],
    pub n_rows: usize,
    pub dropped_windows: usize,
    /// Evaluation requests, including cache hits.
    pub evaluations: usize,
    /// Distinct configurations actually cross-validated.
    pub model_runs: usize,
    pub iterations: usize,
}

pub struct OptimizeOutput {
    pub best: BestReport,
    pub outcome: SearchOutcome,
    pub regions: RegionReport,
}

/// Runs the configured optimizer and writes `best.json`, `trace.jsonl`,
/// `regions.csv` and `regions.json`.
pub fn cmd_optimize(config: &RunConfig) -> Result<OptimizeOutput> {
    let objective = objective_for(config)?;
    prepare_out(config, "optimize", None)?;
    let cache = FitnessCache::new();
    let outcome = match config.optimizer {
        Optimizer::Pso => pso_search(&config.swarm_config(), &objective, &cache)?,
        Optimizer::Random => random_search(config.random_budget, &config.preset.bounds(), &objective, &cache, config.seed)?,
    };
    let detail = cache.get(outcome.best).and_then(|e| e.detail).with_context(|| {
        format!(
            "no usable windowing configuration found: every evaluated point was degenerate (best {})",
            outcome.best
        )
    })?;
    let best = BestReport {
        optimizer: config.optimizer,
        feature_set: config.feature_set,
        window_size_s: outcome.best.window_size_s,
        overlap_pct: outcome.best.overlap_pct,
        accuracy: detail.accuracy,
        fold_accuracies: detail.fold_accuracies,
        confusion: detail.confusion,
        n_rows: detail.n_rows,
        dropped_windows: detail.dropped_windows,
        evaluations: outcome.trace.len(),
        model_runs: cache.evaluations(),
        iterations: outcome.iterations,
    };
    log::info!(
        "best {} accuracy {:.4} after {} evaluations ({:.1} s of model time)",
        outcome.best,
        best.accuracy,
        best.evaluations,
        outcome.trace.total_elapsed_ms() / 1e3
    );
    let regions = write_trace_outputs(config, &outcome.trace)?;
    write_json(&config.out_dir.join("best.json"), &best)?;
    Ok(OptimizeOutput { best, outcome, regions })
}

fn write_trace_outputs(config: &RunConfig, trace: &SearchTrace) -> Result<RegionReport> {
    let out = &config.out_dir;
    fs::write(out.join("trace.jsonl"), trace.to_jsonl()).context("writing trace.jsonl")?;
    write_regions(config, trace)
}

fn write_regions(config: &RunConfig, trace: &SearchTrace) -> Result<RegionReport> {
    let regions = region_report([trace], &BinSpec::for_bounds(&config.preset.bounds()))?;
    fs::write(config.out_dir.join("regions.csv"), regions.to_csv()).context("writing regions.csv")?;
    write_json(&config.out_dir.join("regions.json"), &regions)?;
    Ok(regions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub window_size_s: u32,
    pub overlap_pct: u32,
    pub feature_set: FeatureSet,
    #[serde(flatten)]
    pub result: FitnessResult,
}

/// Cross-validates one windowing configuration and writes `evaluation.json`.
pub fn cmd_evaluate(config: &RunConfig, point: WindowParams) -> Result<EvaluationReport> {
    let objective = objective_for(config)?;
    prepare_out(config, "evaluate", Some(point))?;
    let result = objective
        .try_evaluate(point)
        .map_err(|reason| anyhow::anyhow!("fitness degenerate at {point}: {reason}"))?;
    let report = EvaluationReport {
        window_size_s: point.window_size_s,
        overlap_pct: point.overlap_pct,
        feature_set: config.feature_set,
        result,
    };
    write_json(&config.out_dir.join("evaluation.json"), &report)?;
    Ok(report)
}

/// Cross-validates a prepared feature matrix, bypassing windowing.
pub fn evaluate_matrix(matrix: &FeatureMatrix, config: &RunConfig) -> Result<FitnessResult> {
    matrix.check_usable()?;
    Ok(cv_accuracy(matrix, &config.forest, config.folds)?)
}

/// Evaluates a feature-matrix CSV and writes `evaluation.json`.
pub fn cmd_evaluate_matrix(config: &RunConfig, matrix_path: &Path) -> Result<FitnessResult> {
    let matrix = FeatureMatrix::read_csv(matrix_path, config.feature_set)?;
    prepare_out(config, "evaluate", None)?;
    let result = evaluate_matrix(&matrix, config).map_err(|e| anyhow::anyhow!("fitness degenerate: {e:#}"))?;
    write_json(&config.out_dir.join("evaluation.json"), &result)?;
    Ok(result)
}

/// Writes a synthetic labeled ECG corpus into the ECG directory.
pub fn cmd_synth(config: &RunConfig) -> Result<usize> {
    let ecg_dir = config.ecg_dir();
    prepare_out(config, "synth", None)?;
    fs::create_dir_all(&ecg_dir).with_context(|| format!("creating {}", ecg_dir.display()))?;
    let records = generate_corpus(&config.corpus);
    records.par_iter().enumerate().try_for_each(|(i, rec)| -> Result<()> {
        let ecg = rec.ecg(&config.corpus, i)?;
        write_ecg_csv(&ecg, &ecg_dir.join(format!("{}{ECG_SUFFIX}", rec.record_id)), 6)?;
        write_annotations_csv(&rec.annotations, &ecg_dir.join(format!("{}{ANNOTATION_SUFFIX}", rec.record_id)))?;
        write_json(&ecg_dir.join(format!("{}.beats.json", rec.record_id)), &rec.beat_times_s)?;
        Ok(())
    })?;
    Ok(records.len())
}

/// Re-bins an existing trace into `regions.csv` and `regions.json`.
pub fn cmd_report(config: &RunConfig, trace_path: &Path) -> Result<RegionReport> {
    let text = fs::read_to_string(trace_path).with_context(|| format!("reading {}", trace_path.display()))?;
    let trace = SearchTrace::from_jsonl(&text)?;
    prepare_out(config, "report", None)?;
    write_regions(config, &trace)
}
