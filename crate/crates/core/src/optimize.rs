//! Windowing hyperparameter search.
//!
//! Particle swarm optimization with damped inertia moves particles through
//! the continuous (window size, overlap) box. Fitness is evaluated on the
//! rounded integer key and memoized in a [`FitnessCache`]. Uniform random
//! search over the integer grid serves as the baseline.
//!
//! The coordinator is single-threaded and owns the RNG. Fitness evaluations
//! of one round run in parallel, and results are consumed in a fixed order,
//! so a run is reproducible regardless of thread count.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{cv_accuracy, FitnessResult, ForestParams, DEFAULT_FOLDS};
use crate::windowing::{build_matrix, FeatureSet, LabeledRr, WindowBounds, WindowParams};

#[derive(Debug, Error, PartialEq)]
pub enum OptimizeError {
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("trace is empty")]
    EmptyTrace,
    #[error("trace line {line}: {message}")]
    TraceParse { line: usize, message: String },
}

/// A point in the continuous search space: (window size s, overlap %).
pub type Position = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwarmConfig {
    pub n_particles: usize,
    pub max_iterations: usize,
    /// Cognitive (personal best) learning factor.
    pub c1: f64,
    /// Social (global best) learning factor.
    pub c2: f64,
    pub inertia_start: f64,
    /// Per-iteration multiplier on the inertia weight.
    pub damping: f64,
    /// `[lower, upper]` per dimension.
    pub bounds: [[f64; 2]; 2],
    /// Per-dimension speed cap; `None` means 20% of each range.
    pub v_max: Option<[f64; 2]>,
    pub seed: u64,
    pub early_stop_accuracy: f64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self::for_bounds(&WindowBounds::DRIVEDB)
    }
}

impl SwarmConfig {
    pub const V_MAX_FRACTION: f64 = 0.2;

    pub fn for_bounds(bounds: &WindowBounds) -> Self {
        Self {
            n_particles: 5,
            max_iterations: 30,
            c1: 2.05,
            c2: 2.05,
            inertia_start: 1.0,
            damping: 0.9,
            bounds: [
                [bounds.window_min_s as f64, bounds.window_max_s as f64],
                [bounds.overlap_min_pct as f64, bounds.overlap_max_pct as f64],
            ],
            v_max: None,
            seed: 0,
            early_stop_accuracy: 1.0,
        }
    }

    pub fn v_max(&self) -> [f64; 2] {
        self.v_max.unwrap_or_else(|| {
            let r = |d: usize| Self::V_MAX_FRACTION * (self.bounds[d][1] - self.bounds[d][0]);
            [r(0), r(1)]
        })
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |m: String| Err(OptimizeError::InvalidConfig(m));
        if self.n_particles < 2 {
            return bad(format!("need at least 2 particles, got {}", self.n_particles));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad(format!("damping {} outside (0, 1]", self.damping));
        }
        for (d, [lo, hi]) in self.bounds.iter().enumerate() {
            if !(lo < hi) || *lo < 0.0 {
                return bad(format!("bounds of dimension {d} invalid: [{lo}, {hi}]"));
            }
        }
        if self.v_max().iter().any(|v| !(*v > 0.0)) {
            return bad("v_max must be positive".into());
        }
        Ok(())
    }

    /// Total evaluation requests of a run that never stops early.
    pub fn max_evaluations(&self) -> usize {
        self.n_particles * (self.max_iterations + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub position: Position,
    pub velocity: Position,
    pub pbest_position: Position,
    pub pbest_fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmState {
    pub particles: Vec<Particle>,
    pub gbest_position: Position,
    pub gbest_fitness: f64,
    pub iteration: usize,
    pub omega: f64,
}

/// One velocity/position update:
/// `v' = ω·v + c1·r1∘(pbest − x) + c2·r2∘(gbest − x)`, `x' = x + v'`.
/// The velocity is capped at ±v_max; a position leaving the box is clamped
/// and that velocity component zeroed.
pub fn step_velocity_position(
    particle: &Particle,
    gbest: Position,
    config: &SwarmConfig,
    omega: f64,
    r1: [f64; 2],
    r2: [f64; 2],
) -> Particle {
    let v_max = config.v_max();
    let mut next = particle.clone();
    for d in 0..2 {
        let x = particle.position[d];
        let v = omega * particle.velocity[d]
            + config.c1 * r1[d] * (particle.pbest_position[d] - x)
            + config.c2 * r2[d] * (gbest[d] - x);
        let mut v = v.clamp(-v_max[d], v_max[d]);
        let [lo, hi] = config.bounds[d];
        let mut x = x + v;
        if x < lo {
            x = lo;
            v = 0.0;
        } else if x > hi {
            x = hi;
            v = 0.0;
        }
        next.position[d] = x;
        next.velocity[d] = v;
    }
    next
}

/// Rounds half up to the integer grid and clamps into the box.
pub fn discretize(position: Position, bounds: &[[f64; 2]; 2]) -> WindowParams {
    let snap = |d: usize| {
        let [lo, hi] = bounds[d];
        (position[d] + 0.5).floor().clamp(lo.ceil(), hi.floor()) as u32
    };
    WindowParams::new(snap(0), snap(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub fitness: f64,
    /// Cross-validation details when the objective is a classifier.
    pub detail: Option<FitnessResult>,
}

impl From<f64> for Evaluation {
    fn from(fitness: f64) -> Self {
        Self { fitness, detail: None }
    }
}

/// Fitness of a discrete windowing configuration.
pub trait Objective: Sync {
    fn evaluate(&self, key: WindowParams) -> Evaluation;
}

impl<F> Objective for F
where
    F: Fn(WindowParams) -> f64 + Sync,
{
    fn evaluate(&self, key: WindowParams) -> Evaluation {
        self(key).into()
    }
}

/// Cross-validated Random Forest accuracy of the pooled feature matrix.
#[derive(Debug, Clone)]
pub struct WindowingObjective {
    records: Vec<LabeledRr>,
    pub feature_set: FeatureSet,
    pub forest: ForestParams,
    pub folds: usize,
}

impl WindowingObjective {
    pub fn new(records: Vec<LabeledRr>, feature_set: FeatureSet, forest: ForestParams) -> Result<Self, OptimizeError> {
        if records.is_empty() || records.iter().all(|r| r.rr.is_empty()) {
            return Err(OptimizeError::EmptyDataset);
        }
        Ok(Self {
            records,
            feature_set,
            forest,
            folds: DEFAULT_FOLDS,
        })
    }

    pub fn records(&self) -> &[LabeledRr] {
        &self.records
    }

    /// Full evaluation with the reason for a degenerate point.
    pub fn try_evaluate(&self, key: WindowParams) -> Result<FitnessResult, String> {
        let matrix = build_matrix(&self.records, key, self.feature_set).map_err(|e| e.to_string())?;
        cv_accuracy(&matrix, &self.forest, self.folds).map_err(|e| e.to_string())
    }
}

impl Objective for WindowingObjective {
    fn evaluate(&self, key: WindowParams) -> Evaluation {
        match self.try_evaluate(key) {
            Ok(result) => Evaluation {
                fitness: result.accuracy,
                detail: Some(result),
            },
            Err(reason) => {
                log::debug!("{key}: fitness 0 ({reason})");
                Evaluation {
                    fitness: 0.0,
                    detail: None,
                }
            }
        }
    }
}

/// Memoized fitness keyed by the discrete grid point. Concurrent requests
/// for the same key run the objective once.
#[derive(Debug)]
pub struct FitnessCache {
    enabled: bool,
    entries: Mutex<HashMap<WindowParams, Arc<OnceLock<Evaluation>>>>,
    evaluations: AtomicUsize,
}

impl Default for FitnessCache {
    fn default() -> Self {
        Self::new()
    }
}

impl FitnessCache {
    pub fn new() -> Self {
        Self {
            enabled: true,
            entries: Mutex::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        }
    }

    /// A pass-through cache that evaluates every request.
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::new()
        }
    }

    /// Number of objective invocations so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::SeqCst)
    }

    pub fn get(&self, key: WindowParams) -> Option<Evaluation> {
        let entries = self.entries.lock().expect("cache lock");
        entries.get(&key).and_then(|cell| cell.get().cloned())
    }

    pub fn contains(&self, key: WindowParams) -> bool {
        self.get(key).is_some()
    }

    fn run(&self, key: WindowParams, objective: &dyn Objective) -> Evaluation {
        self.evaluations.fetch_add(1, Ordering::SeqCst);
        objective.evaluate(key)
    }

    /// Returns the stored evaluation or computes and stores it.
    pub fn get_or_evaluate(&self, key: WindowParams, objective: &dyn Objective) -> Evaluation {
        if !self.enabled {
            return self.run(key, objective);
        }
        let cell = {
            let mut entries = self.entries.lock().expect("cache lock");
            Arc::clone(entries.entry(key).or_default())
        };
        cell.get_or_init(|| self.run(key, objective)).clone()
    }

    /// Evaluates a round of requests, running distinct uncached keys in
    /// parallel. Each result carries a flag telling whether it was served
    /// from the cache; the flags depend only on request order.
    pub fn evaluate_batch(&self, keys: &[WindowParams], objective: &dyn Objective) -> Vec<(Evaluation, bool, f64)> {
        if !self.enabled {
            return keys
                .par_iter()
                .map(|&k| {
                    let start = Instant::now();
                    let e = self.run(k, objective);
                    (e, false, start.elapsed().as_secs_f64() * 1e3)
                })
                .collect();
        }
        let mut seen = HashSet::new();
        let mut fresh = Vec::new();
        let mut cached_flags = Vec::with_capacity(keys.len());
        for &k in keys {
            let hit = self.contains(k) || !seen.insert(k);
            if !hit {
                fresh.push(k);
            }
            cached_flags.push(hit);
        }
        let timings: HashMap<WindowParams, f64> = fresh
            .par_iter()
            .map(|&k| {
                let start = Instant::now();
                self.get_or_evaluate(k, objective);
                (k, start.elapsed().as_secs_f64() * 1e3)
            })
            .collect();
        keys.iter()
            .zip(cached_flags)
            .map(|(&k, hit)| {
                let e = self.get_or_evaluate(k, objective);
                let ms = if hit { 0.0 } else { timings[&k] };
                (e, hit, ms)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Particle index (PSO) or draw index (random search).
    pub index: usize,
    pub window_size_s: u32,
    pub overlap_pct: u32,
    pub fitness: f64,
    pub gbest_fitness: f64,
    pub cached: bool,
    /// Wall time of the evaluation; not persisted so traces stay reproducible.
    #[serde(skip)]
    pub elapsed_ms: f64,
}

impl TraceRecord {
    pub fn key(&self) -> WindowParams {
        WindowParams::new(self.window_size_s, self.overlap_pct)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
}

impl SearchTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, OptimizeError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| OptimizeError::TraceParse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn total_elapsed_ms(&self) -> f64 {
        self.records.iter().map(|r| r.elapsed_ms).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: WindowParams,
    pub best_fitness: f64,
    pub trace: SearchTrace,
    /// Evaluation rounds completed (PSO) or draws made (random search).
    pub iterations: usize,
    pub final_state: Option<SwarmState>,
}

fn random_position(rng: &mut ChaCha8Rng, bounds: &[[f64; 2]; 2]) -> Position {
    let mut p = [0.0; 2];
    for d in 0..2 {
        let [lo, hi] = bounds[d];
        p[d] = lo + rng.random::<f64>() * (hi - lo);
    }
    p
}

pub fn pso_search(config: &SwarmConfig, objective: &dyn Objective, cache: &FitnessCache) -> Result<SearchOutcome, OptimizeError> {
    pso_search_observed(config, objective, cache, |_| {})
}

/// PSO with a callback invoked on the swarm after every evaluation round.
pub fn pso_search_observed(
    config: &SwarmConfig,
    objective: &dyn Objective,
    cache: &FitnessCache,
    mut observe: impl FnMut(&SwarmState),
) -> Result<SearchOutcome, OptimizeError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let v_max = config.v_max();
    let particles: Vec<Particle> = (0..config.n_particles)
        .map(|_| {
            let position = random_position(&mut rng, &config.bounds);
            let velocity = [
                (2.0 * rng.random::<f64>() - 1.0) * v_max[0],
                (2.0 * rng.random::<f64>() - 1.0) * v_max[1],
            ];
            Particle {
                position,
                velocity,
                pbest_position: position,
                pbest_fitness: f64::NEG_INFINITY,
            }
        })
        .collect();
    let mut state = SwarmState {
        gbest_position: particles[0].position,
        particles,
        gbest_fitness: f64::NEG_INFINITY,
        iteration: 0,
        omega: config.inertia_start,
    };
    let mut trace = SearchTrace::default();

    loop {
        let keys: Vec<WindowParams> = state
            .particles
            .iter()
            .map(|p| discretize(p.position, &config.bounds))
            .collect();
        let results = cache.evaluate_batch(&keys, objective);
        for (i, ((evaluation, cached, elapsed_ms), key)) in results.into_iter().zip(&keys).enumerate() {
            let particle = &mut state.particles[i];
            if evaluation.fitness > particle.pbest_fitness {
                particle.pbest_fitness = evaluation.fitness;
                particle.pbest_position = particle.position;
            }
            if evaluation.fitness > state.gbest_fitness {
                state.gbest_fitness = evaluation.fitness;
                state.gbest_position = particle.position;
            }
            trace.records.push(TraceRecord {
                iteration: state.iteration,
                index: i,
                window_size_s: key.window_size_s,
                overlap_pct: key.overlap_pct,
                fitness: evaluation.fitness,
                gbest_fitness: state.gbest_fitness,
                cached,
                elapsed_ms,
            });
        }
        observe(&state);
        log::debug!(
            "iteration {}: gbest {:.4} at {}",
            state.iteration,
            state.gbest_fitness,
            discretize(state.gbest_position, &config.bounds)
        );

        if state.gbest_fitness >= config.early_stop_accuracy || state.iteration >= config.max_iterations {
            break;
        }
        // r1, r2 drawn per particle, per dimension, in particle order
        let gbest = state.gbest_position;
        let omega = state.omega;
        for particle in state.particles.iter_mut() {
            let r1 = [rng.random::<f64>(), rng.random::<f64>()];
            let r2 = [rng.random::<f64>(), rng.random::<f64>()];
            *particle = step_velocity_position(particle, gbest, config, omega, r1, r2);
        }
        state.omega *= config.damping;
        state.iteration += 1;
    }

    Ok(SearchOutcome {
        best: discretize(state.gbest_position, &config.bounds),
        best_fitness: state.gbest_fitness,
        trace,
        iterations: state.iteration + 1,
        final_state: Some(state),
    })
}

/// Uniform random search with replacement over the integer grid.
pub fn random_search(
    budget: usize,
    bounds: &WindowBounds,
    objective: &dyn Objective,
    cache: &FitnessCache,
    seed: u64,
) -> Result<SearchOutcome, OptimizeError> {
    if budget == 0 {
        return Err(OptimizeError::InvalidConfig("budget must be at least 1".into()));
    }
    bounds
        .validate()
        .map_err(|e| OptimizeError::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<WindowParams> = (0..budget)
        .map(|_| {
            let w = rng.random_range(bounds.window_min_s..=bounds.window_max_s);
            let o = rng.random_range(bounds.overlap_min_pct..=bounds.overlap_max_pct);
            WindowParams::new(w, o)
        })
        .collect();
    let results = cache.evaluate_batch(&keys, objective);

    let mut trace = SearchTrace::default();
    let mut best: Option<(WindowParams, f64)> = None;
    for (draw, ((evaluation, cached, elapsed_ms), key)) in results.into_iter().zip(&keys).enumerate() {
        if best.is_none_or(|(_, f)| evaluation.fitness > f) {
            best = Some((*key, evaluation.fitness));
        }
        trace.records.push(TraceRecord {
            iteration: draw,
            index: draw,
            window_size_s: key.window_size_s,
            overlap_pct: key.overlap_pct,
            fitness: evaluation.fitness,
            gbest_fitness: best.map(|(_, f)| f).unwrap_or(f64::NEG_INFINITY),
            cached,
            elapsed_ms,
        });
    }
    let (best, best_fitness) = best.expect("budget >= 1");
    Ok(SearchOutcome {
        best,
        best_fitness,
        trace,
        iterations: budget,
        final_state: None,
    })
}

/// Window size and overlap bin edges for region reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub window_edges: Vec<f64>,
    pub overlap_edges: Vec<f64>,
}

impl BinSpec {
    /// Low, medium and high overlap regions.
    pub const OVERLAP_EDGES: [f64; 4] = [5.0, 30.0, 60.0, 95.0];
    pub const WINDOW_BIN_S: u32 = 30;

    /// 30 s window bins aligned to multiples of 30 s, starting at the lower
    /// bound, with the standard overlap regions.
    pub fn for_bounds(bounds: &WindowBounds) -> Self {
        let mut window_edges = vec![bounds.window_min_s as f64];
        let mut edge = (bounds.window_min_s / Self::WINDOW_BIN_S + 1) * Self::WINDOW_BIN_S;
        loop {
            window_edges.push(edge as f64);
            if edge >= bounds.window_max_s {
                break;
            }
            edge += Self::WINDOW_BIN_S;
        }
        Self {
            window_edges,
            overlap_edges: Self::OVERLAP_EDGES.to_vec(),
        }
    }

    fn bin(edges: &[f64], value: f64) -> Option<usize> {
        let last = edges.len().checked_sub(2)?;
        (0..=last).find(|&b| value >= edges[b] && (value < edges[b + 1] || (b == last && value <= edges[b + 1])))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCell {
    pub win_bin_lo: f64,
    pub win_bin_hi: f64,
    pub ov_bin_lo: f64,
    pub ov_bin_hi: f64,
    /// `None` for a bin without evaluations.
    pub mean_acc: Option<f64>,
    pub n_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub cells: Vec<RegionCell>,
    /// Evaluations falling outside every bin.
    pub unbinned: usize,
}

impl RegionReport {
    pub const CSV_HEADER: &'static str = "win_bin_lo,win_bin_hi,ov_bin_lo,ov_bin_hi,mean_acc,n_evals";

    /// Empty bins leave `mean_acc` blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            let mean = c.mean_acc.map(|m| m.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.win_bin_lo, c.win_bin_hi, c.ov_bin_lo, c.ov_bin_hi, mean, c.n_evals
            ));
        }
        out
    }

    /// Evaluation-weighted mean fitness over cells whose overlap range
    /// starts at `ov_lo`.
    pub fn overlap_band_mean(&self, ov_lo: f64) -> Option<f64> {
        let (sum, n) = self
            .cells
            .iter()
            .filter(|c| c.ov_bin_lo == ov_lo)
            .filter_map(|c| c.mean_acc.map(|m| (m * c.n_evals as f64, c.n_evals)))
            .fold((0.0, 0usize), |(s, n), (m, k)| (s + m, n + k));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Mean evaluated fitness per (window bin, overlap bin) over all records.
pub fn region_report<'a>(
    traces: impl IntoIterator<Item = &'a SearchTrace>,
    spec: &BinSpec,
) -> Result<RegionReport, OptimizeError> {
    let nw = spec.window_edges.len().saturating_sub(1);
    let no = spec.overlap_edges.len().saturating_sub(1);
    if nw == 0 || no == 0 {
        return Err(OptimizeError::InvalidConfig("bin spec needs at least two edges per axis".into()));
    }
    let mut sums = vec![vec![(0.0, 0usize); no]; nw];
    let mut unbinned = 0;
    let mut total = 0;
    for record in traces.into_iter().flat_map(|t| &t.records) {
        total += 1;
        match (
            BinSpec::bin(&spec.window_edges, record.window_size_s as f64),
            BinSpec::bin(&spec.overlap_edges, record.overlap_pct as f64),
        ) {
            (Some(w), Some(o)) => {
                sums[w][o].0 += record.fitness;
                sums[w][o].1 += 1;
            }
            _ => unbinned += 1,
        }
    }
    if total == 0 {
        return Err(OptimizeError::EmptyTrace);
    }
    let mut cells = Vec::with_capacity(nw * no);
    for w in 0..nw {
        for o in 0..no {
            let (sum, n) = sums[w][o];
            cells.push(RegionCell {
                win_bin_lo: spec.window_edges[w],
                win_bin_hi: spec.window_edges[w + 1],
                ov_bin_lo: spec.overlap_edges[o],
                ov_bin_hi: spec.overlap_edges[o + 1],
                mean_acc: (n > 0).then(|| sum / n as f64),
                n_evals: n,
            });
        }
    }
    Ok(RegionReport { cells, unbinned })
}
