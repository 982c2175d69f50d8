//! Declarative system-identification experiments: signal assembly, paired
//! multi-algorithm trials, ensemble averaging, parameter sweeps and CSV export.
//!
//! Trial `t` draws its input from seed `base_seed + t`, its noise from
//! `base_seed + t + 10⁶` and its synthetic path from `base_seed + t + 2·10⁶`.
//! All algorithms of one trial see the same input, noise and path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{self, NMSD_FLOOR_DB};
use crate::engine::{EngineError, SafConfig, SafEngine};
use crate::filterbank::{design_bank, AnalysisBank, FilterBankError};
use crate::proportionate::GainRule;
use crate::signals::{
    add_noise, convolve_path, gen_sparse_echo_path, load_path_taps, EchoPath, Normalization, SignalError, SignalSource,
};
use crate::step_control::{StepController, StepError};

pub const NOISE_SEED_OFFSET: u64 = 1_000_000;
pub const PATH_SEED_OFFSET: u64 = 2_000_000;
/// Length of the trailing window used for steady-state estimates.
pub const STEADY_STATE_ITERATIONS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidSpec(String),
    #[error("sweep parameter `{param}` does not apply: {reason}")]
    InapplicableSweep { param: &'static str, reason: String },
    #[error("invalid sweep value {value} for `{param}`")]
    InvalidSweepValue { param: &'static str, value: f64 },
    #[error("algorithm `{name}`: {source}")]
    Algorithm {
        name: String,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    FilterBank(#[from] FilterBankError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Step(#[from] StepError),
    #[error(transparent)]
    Diagnostics(#[from] diagnostics::DiagnosticsError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot serialize manifest: {0}")]
    ManifestWrite(#[from] toml::ser::Error),
    #[error("cannot parse manifest: {0}")]
    ManifestRead(#[from] toml::de::Error),
    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn default_pole() -> f64 {
    0.95
}
fn default_unit() -> f64 {
    1.0
}
fn default_decay() -> f64 {
    4.0
}
fn default_stopband() -> f64 {
    60.0
}
fn default_regularization() -> f64 {
    1e-3
}
fn default_gamma() -> f64 {
    9.0
}
fn default_lambda() -> f64 {
    3.5
}
fn default_stride() -> usize {
    1
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    Ar1 {
        #[serde(default = "default_pole")]
        pole: f64,
        #[serde(default = "default_unit")]
        innovation_variance: f64,
    },
    White {
        #[serde(default = "default_unit")]
        variance: f64,
    },
    Wav {
        path: PathBuf,
        #[serde(default)]
        normalization: Normalization,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathSpec {
    /// Seeded synthetic sparse path of length `M`.
    Sparse {
        active_taps: usize,
        #[serde(default = "default_decay")]
        decay_rate: f64,
    },
    /// Taps read from a text file, zero-padded to `M`.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepControlSpec {
    Fixed {
        mu: f64,
    },
    SetMembership {
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    ShrinkageVss {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_unit")]
        kappa: f64,
    },
}

impl StepControlSpec {
    pub fn build(
        &self,
        noise_variance: f64,
        num_subbands: usize,
        filter_length: usize,
    ) -> Result<StepController, StepError> {
        match *self {
            StepControlSpec::Fixed { mu } => StepController::fixed(mu),
            StepControlSpec::SetMembership { gamma } => {
                StepController::set_membership(gamma, noise_variance, num_subbands)
            }
            StepControlSpec::ShrinkageVss { lambda, kappa } => {
                StepController::shrinkage_vss(lambda, kappa, noise_variance, num_subbands, filter_length)
            }
        }
    }

    fn needs_noise_variance(&self) -> bool {
        !matches!(self, StepControlSpec::Fixed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub name: String,
    #[serde(default)]
    pub gain_rule: GainRule,
    pub step_control: StepControlSpec,
    #[serde(default = "default_regularization")]
    pub regularization: f64,
    /// Overrides the experiment's `N` for this algorithm (e.g. an NLMS baseline with `N = 1`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_subbands: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    /// Record every `nmsd_stride`-th iteration.
    #[serde(default = "default_stride")]
    pub nmsd_stride: usize,
    /// Trailing window for ERLE; `None` skips the fullband error computation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub erle_window: Option<usize>,
    #[serde(default = "default_true")]
    pub record_steps: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            nmsd_stride: 1,
            erle_window: None,
            record_steps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub input: InputSpec,
    pub filter_length: usize,
    pub num_subbands: usize,
    /// Defaults to `8N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_length: Option<usize>,
    #[serde(default = "default_stopband")]
    pub stopband_db: f64,
    pub snr_db: f64,
    pub path: PathSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_flip_sample: Option<usize>,
    pub run_length: usize,
    pub ensemble_size: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub metrics: MetricOptions,
    pub algorithms: Vec<AlgorithmSpec>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn prototype_length_for(num_subbands: usize) -> usize {
    8 * num_subbands
}

impl ExperimentSpec {
    pub fn subbands_of(&self, algorithm: &AlgorithmSpec) -> usize {
        algorithm.num_subbands.unwrap_or(self.num_subbands)
    }

    /// Least common multiple of every algorithm's `N`: the block grid that
    /// all algorithms share.
    pub fn block_grid(&self) -> usize {
        self.algorithms
            .iter()
            .map(|a| self.subbands_of(a))
            .fold(self.num_subbands.max(1), |acc, n| acc / gcd(acc, n) * n)
    }

    /// Run length truncated to the block grid.
    pub fn effective_run_length(&self) -> usize {
        let grid = self.block_grid();
        self.run_length / grid * grid
    }

    /// Flip index moved down to the nearest block boundary.
    pub fn aligned_flip_sample(&self) -> Option<usize> {
        let grid = self.block_grid();
        self.path_flip_sample.map(|f| f / grid * grid)
    }

    pub fn prototype_length_of(&self, num_subbands: usize) -> usize {
        if num_subbands == self.num_subbands {
            self.prototype_length
                .unwrap_or_else(|| prototype_length_for(num_subbands))
        } else {
            prototype_length_for(num_subbands)
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |s: String| Err(HarnessError::InvalidSpec(s));
        if self.filter_length == 0 {
            return bad("filter_length must be positive".into());
        }
        if self.num_subbands == 0 {
            return bad("num_subbands must be at least 1".into());
        }
        if self.ensemble_size == 0 {
            return bad("ensemble_size must be at least 1".into());
        }
        if self.algorithms.is_empty() {
            return bad("at least one algorithm is required".into());
        }
        if self.metrics.nmsd_stride == 0 {
            return bad("metrics.nmsd_stride must be at least 1".into());
        }
        if self.metrics.erle_window == Some(0) {
            return bad("metrics.erle_window must be at least 1".into());
        }
        if self.snr_db.is_nan() {
            return bad("snr_db must be a number".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for a in &self.algorithms {
            if a.name.is_empty()
                || !a
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
            {
                return bad(format!("algorithm name `{}` must be non-empty [A-Za-z0-9._-]", a.name));
            }
            if !names.insert(a.name.as_str()) {
                return bad(format!("duplicate algorithm name `{}`", a.name));
            }
            if self.subbands_of(a) == 0 {
                return bad(format!("algorithm `{}`: num_subbands must be at least 1", a.name));
            }
            if a.step_control.needs_noise_variance() && self.snr_db == f64::INFINITY {
                return bad(format!(
                    "algorithm `{}` needs a finite snr_db: its step controller uses the noise variance",
                    a.name
                ));
            }
            a.gain_rule
                .validate()
                .map_err(|e| HarnessError::InvalidSpec(format!("algorithm `{}`: {e}", a.name)))?;
            // Catch parameter errors before any simulation work.
            a.step_control
                .build(1.0, self.subbands_of(a), self.filter_length)
                .map_err(|e| HarnessError::InvalidSpec(format!("algorithm `{}`: {e}", a.name)))?;
            if !(a.regularization > 0.0 && a.regularization.is_finite()) {
                return bad(format!("algorithm `{}`: regularization must be positive", a.name));
            }
        }
        if let PathSpec::Sparse { active_taps, .. } = self.path {
            if active_taps == 0 || active_taps > self.filter_length {
                return bad(format!("path.active_taps must lie in 1..={}", self.filter_length));
            }
        }
        if self.effective_run_length() == 0 {
            return bad(format!(
                "run_length shorter than one block of {} samples",
                self.block_grid()
            ));
        }
        Ok(())
    }

    pub fn trial_seeds(&self, trial: usize) -> SeedLineage {
        let base = self.base_seed.wrapping_add(trial as u64);
        SeedLineage {
            trial,
            input_seed: base,
            noise_seed: base.wrapping_add(NOISE_SEED_OFFSET),
            path_seed: base.wrapping_add(PATH_SEED_OFFSET),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub trial: usize,
    pub input_seed: u64,
    pub noise_seed: u64,
    pub path_seed: u64,
}

/// All signals of one trial, shared by every algorithm.
#[derive(Debug, Clone)]
pub struct TrialSignals {
    pub seeds: SeedLineage,
    pub input: Vec<f64>,
    pub desired: Vec<f64>,
    pub noise: Vec<f64>,
    pub noise_variance: f64,
    /// `w_o` zero-padded to `M`.
    pub path: Vec<f64>,
    pub flip_at: Option<usize>,
}

impl TrialSignals {
    pub fn generate(spec: &ExperimentSpec, trial: usize) -> Result<Self, HarnessError> {
        let seeds = spec.trial_seeds(trial);
        let m = spec.filter_length;
        let echo = match &spec.path {
            PathSpec::Sparse {
                active_taps,
                decay_rate,
            } => gen_sparse_echo_path(m, *active_taps, *decay_rate, seeds.path_seed)?,
            PathSpec::File { path } => load_path_taps(path)?,
        };
        if echo.len() > m {
            return Err(HarnessError::InvalidSpec(format!(
                "echo path has {} taps but the adaptive filter only {m}",
                echo.len()
            )));
        }
        let source = match &spec.input {
            InputSpec::Ar1 {
                pole,
                innovation_variance,
            } => SignalSource::Ar1 {
                pole: *pole,
                innovation_variance: *innovation_variance,
                seed: seeds.input_seed,
            },
            InputSpec::White { variance } => SignalSource::WhiteGaussian {
                variance: *variance,
                seed: seeds.input_seed,
            },
            InputSpec::Wav { path, normalization } => SignalSource::PcmFile {
                path: path.clone(),
                normalization: *normalization,
            },
        };
        let grid = spec.block_grid();
        let mut input = source.generate(spec.effective_run_length())?;
        input.truncate(input.len() / grid * grid);
        if input.is_empty() {
            return Err(HarnessError::InvalidSpec("input shorter than one block".into()));
        }
        let mut clean = convolve_path(&echo, &input);
        let flip_at = spec.aligned_flip_sample().filter(|&f| f < input.len());
        if let Some(f) = flip_at {
            clean[f..].iter_mut().for_each(|c| *c = -*c);
        }
        let run = add_noise(input, clean, spec.snr_db, seeds.noise_seed)?;
        let mut path = echo.weights().to_vec();
        path.resize(m, 0.0);
        Ok(TrialSignals {
            seeds,
            input: run.input,
            desired: run.desired,
            noise: run.noise,
            noise_variance: run.noise_variance,
            path,
            flip_at,
        })
    }

    /// True path in effect at fullband sample `n`.
    pub fn path_sign_at(&self, n: usize) -> f64 {
        match self.flip_at {
            Some(f) if n >= f => -1.0,
            _ => 1.0,
        }
    }
}

/// One algorithm's recorded trajectory over one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub algorithm: String,
    pub num_subbands: usize,
    pub iterations: Vec<u64>,
    /// Last fullband sample consumed by each recorded iteration.
    pub fullband: Vec<u64>,
    /// `‖w_o − w(k+1)‖² / ‖w_o‖²` (linear).
    pub msd: Vec<f64>,
    pub erle_db: Option<Vec<f64>>,
    /// `μ_i(k)` per recorded iteration when step recording is on.
    pub steps: Option<Vec<Vec<f64>>>,
    /// Smallest and largest `μ_i(k)` over every iteration and subband.
    pub step_range: (f64, f64),
    pub diverged_at: Option<u64>,
}

impl MetricSeries {
    pub fn nmsd_db(&self) -> Vec<f64> {
        self.msd.iter().map(|&x| diagnostics::to_db(x, NMSD_FLOOR_DB)).collect()
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }
}

/// Banks keyed by subband count; designed once per ensemble.
#[derive(Debug, Clone, Default)]
pub struct BankCache(BTreeMap<usize, AnalysisBank>);

impl BankCache {
    pub fn for_spec(spec: &ExperimentSpec) -> Result<Self, HarnessError> {
        let mut cache = BTreeMap::new();
        for a in &spec.algorithms {
            let n = spec.subbands_of(a);
            if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(n) {
                let bank = if n == 1 {
                    AnalysisBank::identity()
                } else {
                    design_bank(n, spec.prototype_length_of(n), spec.stopband_db)?
                };
                slot.insert(bank);
            }
        }
        Ok(BankCache(cache))
    }

    pub fn get(&self, num_subbands: usize) -> Option<&AnalysisBank> {
        self.0.get(&num_subbands)
    }
}

/// Runs one algorithm over one trial's signals.
pub fn run_algorithm(
    spec: &ExperimentSpec,
    algorithm: &AlgorithmSpec,
    signals: &TrialSignals,
    banks: &BankCache,
) -> Result<MetricSeries, HarnessError> {
    let n = spec.subbands_of(algorithm);
    let m = spec.filter_length;
    let wrap = |source: EngineError| HarnessError::Algorithm {
        name: algorithm.name.clone(),
        source,
    };
    let bank = banks
        .get(n)
        .cloned()
        .ok_or_else(|| HarnessError::InvalidSpec(format!("no bank designed for N = {n}")))?;
    let controller = algorithm.step_control.build(signals.noise_variance, n, m)?;
    let config = SafConfig {
        filter_length: m,
        num_subbands: n,
        regularization: algorithm.regularization,
        gain_rule: algorithm.gain_rule,
        step_controller: controller,
    };
    let mut engine = SafEngine::new(config, bank).map_err(wrap)?;

    let stride = spec.metrics.nmsd_stride as u64;
    let blocks = signals.input.len() / n;
    let reference = diagnostics::deviation_power(&signals.path, &vec![0.0; m]);
    let mut series = MetricSeries {
        algorithm: algorithm.name.clone(),
        num_subbands: n,
        iterations: Vec::with_capacity(blocks / stride as usize + 1),
        fullband: Vec::new(),
        msd: Vec::new(),
        erle_db: None,
        steps: spec.metrics.record_steps.then(Vec::new),
        step_range: (f64::INFINITY, f64::NEG_INFINITY),
        diverged_at: None,
    };
    let mut fullband_error = spec
        .metrics
        .erle_window
        .map(|_| Vec::with_capacity(signals.input.len()));
    let mut history = crate::delay::DelayLine::new(m);

    for k in 0..blocks {
        let lo = k * n;
        let (u, d) = (&signals.input[lo..lo + n], &signals.desired[lo..lo + n]);
        if let Some(errors) = fullband_error.as_mut() {
            for (&x, &dn) in u.iter().zip(d) {
                history.push(x);
                errors.push(dn - crate::filterbank::dot(history.window(), engine.weights()));
            }
        }
        let telemetry = match engine.process_block(u, d) {
            Ok(t) => t,
            Err(EngineError::Diverged { iteration }) => {
                log::warn!("{}: diverged at iteration {iteration}", algorithm.name);
                series.diverged_at = Some(iteration);
                break;
            }
            Err(e) => return Err(wrap(e)),
        };
        for &s in telemetry.steps {
            series.step_range.0 = series.step_range.0.min(s);
            series.step_range.1 = series.step_range.1.max(s);
        }
        let k = k as u64;
        if k.is_multiple_of(stride) || k + 1 == blocks as u64 {
            let last = lo + n - 1;
            let sign = signals.path_sign_at(last);
            let dev: f64 = signals
                .path
                .iter()
                .zip(telemetry.weights)
                .map(|(w_o, w)| (sign * w_o - w) * (sign * w_o - w))
                .sum();
            series.iterations.push(k);
            series.fullband.push(last as u64);
            series.msd.push(dev / reference);
            if let Some(steps) = series.steps.as_mut() {
                steps.push(telemetry.steps.to_vec());
            }
        }
    }

    if let (Some(window), Some(errors)) = (spec.metrics.erle_window, fullband_error) {
        let d = &signals.desired[..errors.len()];
        let erle = if window <= errors.len() {
            diagnostics::erle_db(d, &errors, window)?
        } else {
            Vec::new()
        };
        series.erle_db = Some(
            series
                .fullband
                .iter()
                .map(|&n| {
                    let n = n as usize;
                    if n + 1 >= window {
                        erle.get(n + 1 - window).copied().unwrap_or(f64::NAN)
                    } else {
                        f64::NAN
                    }
                })
                .collect(),
        );
    }
    Ok(series)
}

/// All algorithms of `spec` over trial `trial`, on shared signals.
pub fn run_trial(spec: &ExperimentSpec, trial: usize) -> Result<Vec<MetricSeries>, HarnessError> {
    spec.validate()?;
    let banks = BankCache::for_spec(spec)?;
    run_trial_with(spec, trial, &banks)
}

fn run_trial_with(spec: &ExperimentSpec, trial: usize, banks: &BankCache) -> Result<Vec<MetricSeries>, HarnessError> {
    let signals = TrialSignals::generate(spec, trial)?;
    spec.algorithms
        .iter()
        .map(|a| run_algorithm(spec, a, &signals, banks))
        .collect()
}

/// First recorded iteration at which a curve reaches a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossing {
    pub iteration: u64,
    /// Fullband sample index at the end of that iteration.
    pub sample: u64,
}

/// Ensemble-mean curves of one algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSeries {
    pub iterations: Vec<u64>,
    pub fullband: Vec<u64>,
    /// `10 log10` of the ensemble-mean normalized deviation.
    pub nmsd_db: Vec<f64>,
    /// Per-trial ERLE in dB, averaged across trials.
    pub erle_db: Option<Vec<f64>>,
    pub mean_steps: Option<Vec<Vec<f64>>>,
}

impl MeanSeries {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// First recorded point with `nmsd_db ≤ level_db`.
    pub fn time_to(&self, level_db: f64) -> Option<Crossing> {
        self.first_at_or_below(0, level_db)
    }

    /// First point at or after fullband sample `from_sample` with `nmsd_db ≤ level_db`.
    pub fn time_to_after(&self, from_sample: u64, level_db: f64) -> Option<Crossing> {
        let start = self.fullband.partition_point(|&n| n < from_sample);
        self.first_at_or_below(start, level_db)
    }

    fn first_at_or_below(&self, start: usize, level_db: f64) -> Option<Crossing> {
        (start..self.len())
            .find(|&j| self.nmsd_db[j] <= level_db)
            .map(|j| Crossing {
                iteration: self.iterations[j],
                sample: self.fullband[j],
            })
    }

    /// Mean of `nmsd_db` over the last [`STEADY_STATE_ITERATIONS`] iterations.
    pub fn steady_state_db(&self) -> f64 {
        match self.iterations.last() {
            Some(&last) => self.window_mean_db(last + 1, STEADY_STATE_ITERATIONS),
            None => f64::NAN,
        }
    }

    /// Mean of `nmsd_db` over iterations in `[end − span, end)`.
    pub fn window_mean_db(&self, end_iteration: u64, span: u64) -> f64 {
        window_mean(&self.iterations, &self.nmsd_db, end_iteration, span)
    }

    /// Last iteration index whose block ends before fullband sample `sample`.
    pub fn iterations_before_sample(&self, sample: u64) -> u64 {
        let j = self.fullband.partition_point(|&n| n < sample);
        if j == 0 {
            0
        } else {
            self.iterations[j - 1] + 1
        }
    }
}

fn window_mean(iterations: &[u64], values: &[f64], end: u64, span: u64) -> f64 {
    let start = end.saturating_sub(span);
    let (sum, count) = iterations
        .iter()
        .zip(values)
        .filter(|(&k, _)| k >= start && k < end)
        .fold((0.0, 0usize), |(s, c), (_, &v)| (s + v, c + 1));
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmResult {
    pub name: String,
    pub num_subbands: usize,
    pub mean: MeanSeries,
    pub steady_state_db: f64,
    /// Steady state of each trial's own NMSD curve, in trial order.
    pub trial_steady_state_db: Vec<f64>,
    pub step_range: (f64, f64),
    /// `(trial, iteration)` for every diverged trial.
    pub diverged: Vec<(usize, u64)>,
}

impl AlgorithmResult {
    pub fn time_to(&self, level_db: f64) -> Option<Crossing> {
        self.mean.time_to(level_db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub spec: ExperimentSpec,
    pub algorithms: Vec<AlgorithmResult>,
    pub seeds: Vec<SeedLineage>,
    pub aligned_flip_sample: Option<usize>,
}

impl EnsembleResult {
    pub fn algorithm(&self, name: &str) -> Option<&AlgorithmResult> {
        self.algorithms.iter().find(|a| a.name == name)
    }

    pub fn any_diverged(&self) -> bool {
        self.algorithms.iter().any(|a| !a.diverged.is_empty())
    }
}

/// Running sums for one algorithm, folded in trial order.
struct Accumulator {
    name: String,
    num_subbands: usize,
    iterations: Vec<u64>,
    fullband: Vec<u64>,
    msd: Vec<f64>,
    erle: Option<Vec<f64>>,
    steps: Option<Vec<Vec<f64>>>,
    trials: usize,
    trial_ss: Vec<f64>,
    step_range: (f64, f64),
    diverged: Vec<(usize, u64)>,
}

impl Accumulator {
    fn new(series: &MetricSeries) -> Self {
        Accumulator {
            name: series.algorithm.clone(),
            num_subbands: series.num_subbands,
            iterations: series.iterations.clone(),
            fullband: series.fullband.clone(),
            msd: vec![0.0; series.len()],
            erle: series.erle_db.as_ref().map(|e| vec![0.0; e.len()]),
            steps: series
                .steps
                .as_ref()
                .map(|s| s.iter().map(|row| vec![0.0; row.len()]).collect()),
            trials: 0,
            trial_ss: Vec::new(),
            step_range: (f64::INFINITY, f64::NEG_INFINITY),
            diverged: Vec::new(),
        }
    }

    fn add(&mut self, trial: usize, series: &MetricSeries) {
        let len = self.msd.len().min(series.len());
        self.iterations.truncate(len);
        self.fullband.truncate(len);
        self.msd.truncate(len);
        for (acc, &x) in self.msd.iter_mut().zip(&series.msd) {
            *acc += x;
        }
        if let (Some(acc), Some(e)) = (self.erle.as_mut(), series.erle_db.as_ref()) {
            acc.truncate(len);
            for (a, &x) in acc.iter_mut().zip(e) {
                *a += x;
            }
        }
        if let (Some(acc), Some(s)) = (self.steps.as_mut(), series.steps.as_ref()) {
            acc.truncate(len);
            for (row, srow) in acc.iter_mut().zip(s) {
                for (a, &x) in row.iter_mut().zip(srow) {
                    *a += x;
                }
            }
        }
        let db = series.nmsd_db();
        let ss = match series.iterations.last() {
            Some(&last) => window_mean(&series.iterations, &db, last + 1, STEADY_STATE_ITERATIONS),
            None => f64::NAN,
        };
        self.trial_ss.push(ss);
        self.step_range.0 = self.step_range.0.min(series.step_range.0);
        self.step_range.1 = self.step_range.1.max(series.step_range.1);
        if let Some(k) = series.diverged_at {
            self.diverged.push((trial, k));
        }
        self.trials += 1;
    }

    fn finish(self) -> AlgorithmResult {
        let t = self.trials.max(1) as f64;
        let mean = MeanSeries {
            nmsd_db: self
                .msd
                .iter()
                .map(|&x| diagnostics::to_db(x / t, NMSD_FLOOR_DB))
                .collect(),
            erle_db: self.erle.map(|e| e.into_iter().map(|x| x / t).collect()),
            mean_steps: self.steps.map(|s| {
                s.into_iter()
                    .map(|row| row.into_iter().map(|x| x / t).collect())
                    .collect()
            }),
            iterations: self.iterations,
            fullband: self.fullband,
        };
        AlgorithmResult {
            name: self.name,
            num_subbands: self.num_subbands,
            steady_state_db: mean.steady_state_db(),
            mean,
            trial_steady_state_db: self.trial_ss,
            step_range: self.step_range,
            diverged: self.diverged,
        }
    }
}

/// Worker-count policy for ensembles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Upper bound on worker threads; `None` uses every available core.
    pub threads: Option<usize>,
}

fn map_trials<T: Send>(
    trials: std::ops::Range<usize>,
    options: RunOptions,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Result<Vec<T>, HarnessError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = options.threads {
            builder = builder.num_threads(n.max(1));
        }
        let pool = builder.build().map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
        Ok(pool.install(|| trials.into_par_iter().map(&f).collect()))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = options;
        Ok(trials.map(f).collect())
    }
}

fn worker_count(options: RunOptions) -> usize {
    #[cfg(feature = "parallel")]
    {
        options.threads.unwrap_or_else(rayon::current_num_threads).max(1)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = options;
        1
    }
}

pub fn run_ensemble(spec: &ExperimentSpec) -> Result<EnsembleResult, HarnessError> {
    run_ensemble_with(spec, RunOptions::default())
}

/// Runs `ensemble_size` paired trials and averages them in the linear
/// deviation domain. Trials execute in parallel chunks but are folded in
/// trial order, so results do not depend on scheduling.
pub fn run_ensemble_with(spec: &ExperimentSpec, options: RunOptions) -> Result<EnsembleResult, HarnessError> {
    spec.validate()?;
    let banks = BankCache::for_spec(spec)?;
    let chunk = worker_count(options);
    let mut accumulators: Option<Vec<Accumulator>> = None;
    let mut start = 0;
    while start < spec.ensemble_size {
        let end = (start + chunk).min(spec.ensemble_size);
        let outputs = map_trials(start..end, options, |t| run_trial_with(spec, t, &banks))?;
        for (offset, output) in outputs.into_iter().enumerate() {
            let series = output?;
            let accs = accumulators.get_or_insert_with(|| series.iter().map(Accumulator::new).collect());
            for (acc, s) in accs.iter_mut().zip(&series) {
                acc.add(start + offset, s);
            }
        }
        start = end;
    }
    let algorithms = accumulators
        .unwrap_or_default()
        .into_iter()
        .map(Accumulator::finish)
        .collect();
    Ok(EnsembleResult {
        seeds: (0..spec.ensemble_size).map(|t| spec.trial_seeds(t)).collect(),
        aligned_flip_sample: spec.aligned_flip_sample(),
        spec: spec.clone(),
        algorithms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Lambda,
    NumSubbands,
    Mu,
    SnrDb,
}

impl SweepParameter {
    pub fn key(&self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::NumSubbands => "num_subbands",
            SweepParameter::Mu => "mu",
            SweepParameter::SnrDb => "snr_db",
        }
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lambda" => Ok(SweepParameter::Lambda),
            "num_subbands" | "subbands" | "n" => Ok(SweepParameter::NumSubbands),
            "mu" => Ok(SweepParameter::Mu),
            "snr_db" | "snr" => Ok(SweepParameter::SnrDb),
            other => Err(format!(
                "unknown sweep parameter `{other}` (expected lambda, subbands, mu or snr_db)"
            )),
        }
    }
}

/// Copy of `spec` with `param` set to `value` everywhere it applies.
pub fn apply_sweep_value(
    spec: &ExperimentSpec,
    param: SweepParameter,
    value: f64,
) -> Result<ExperimentSpec, HarnessError> {
    let key = param.key();
    let invalid = || HarnessError::InvalidSweepValue { param: key, value };
    let mut out = spec.clone();
    match param {
        SweepParameter::Lambda => {
            if !(value > 0.0 && value.is_finite()) {
                return Err(invalid());
            }
            let mut touched = false;
            for a in &mut out.algorithms {
                if let StepControlSpec::ShrinkageVss { lambda, .. } = &mut a.step_control {
                    *lambda = value;
                    touched = true;
                }
            }
            if !touched {
                return Err(HarnessError::InapplicableSweep {
                    param: key,
                    reason: "no algorithm uses the shrinkage step controller".into(),
                });
            }
        }
        SweepParameter::Mu => {
            if !(value > 0.0 && value < 2.0) {
                return Err(invalid());
            }
            let mut touched = false;
            for a in &mut out.algorithms {
                if let StepControlSpec::Fixed { mu } = &mut a.step_control {
                    *mu = value;
                    touched = true;
                }
            }
            if !touched {
                return Err(HarnessError::InapplicableSweep {
                    param: key,
                    reason: "no algorithm uses a fixed step size".into(),
                });
            }
        }
        SweepParameter::NumSubbands => {
            if !(value >= 1.0 && value.fract() == 0.0 && value <= 1024.0) {
                return Err(invalid());
            }
            out.num_subbands = value as usize;
            out.prototype_length = None;
            for a in &mut out.algorithms {
                a.num_subbands = None;
            }
        }
        SweepParameter::SnrDb => {
            if value.is_nan() {
                return Err(invalid());
            }
            out.snr_db = value;
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub result: EnsembleResult,
}

pub fn sweep(spec: &ExperimentSpec, param: SweepParameter, values: &[f64]) -> Result<Vec<SweepPoint>, HarnessError> {
    sweep_with(spec, param, values, RunOptions::default())
}

/// One ensemble per value; every spec is validated before the first run.
pub fn sweep_with(
    spec: &ExperimentSpec,
    param: SweepParameter,
    values: &[f64],
    options: RunOptions,
) -> Result<Vec<SweepPoint>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::InapplicableSweep {
            param: param.key(),
            reason: "no values given".into(),
        });
    }
    let specs: Vec<ExperimentSpec> = values
        .iter()
        .map(|&v| apply_sweep_value(spec, param, v))
        .collect::<Result<_, _>>()?;
    specs
        .iter()
        .zip(values)
        .map(|(s, &value)| {
            Ok(SweepPoint {
                value,
                result: run_ensemble_with(s, options)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankRow {
    pub name: String,
    pub steady_state_db: f64,
    pub time_to_level: Option<Crossing>,
    /// 1 = lowest steady-state NMSD.
    pub steady_state_rank: usize,
    /// 1 = earliest crossing in fullband samples; never-crossing curves rank last.
    pub speed_rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub result: EnsembleResult,
    pub level_db: f64,
    pub ranking: Vec<RankRow>,
}

impl Comparison {
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<24} {:>14} {:>6} {:>22} {:>6}\n",
            "algorithm",
            "steady NMSD",
            "rank",
            format!("samples to {} dB", self.level_db),
            "rank"
        );
        for r in &self.ranking {
            let t = r
                .time_to_level
                .map_or_else(|| "never".to_string(), |c| c.sample.to_string());
            let _ = writeln!(
                out,
                "{:<24} {:>11.2} dB {:>6} {:>22} {:>6}",
                r.name, r.steady_state_db, r.steady_state_rank, t, r.speed_rank
            );
        }
        out
    }
}

pub fn rank(result: &EnsembleResult, level_db: f64) -> Vec<RankRow> {
    let algs = &result.algorithms;
    let mut by_ss: Vec<usize> = (0..algs.len()).collect();
    by_ss.sort_by(|&a, &b| algs[a].steady_state_db.total_cmp(&algs[b].steady_state_db));
    let times: Vec<Option<Crossing>> = algs.iter().map(|a| a.time_to(level_db)).collect();
    let mut by_speed: Vec<usize> = (0..algs.len()).collect();
    by_speed.sort_by_key(|&i| times[i].map_or(u64::MAX, |c| c.sample));
    algs.iter()
        .enumerate()
        .map(|(i, a)| RankRow {
            name: a.name.clone(),
            steady_state_db: a.steady_state_db,
            time_to_level: times[i],
            steady_state_rank: by_ss.iter().position(|&j| j == i).unwrap() + 1,
            speed_rank: by_speed.iter().position(|&j| j == i).unwrap() + 1,
        })
        .collect()
}

pub fn compare(spec: &ExperimentSpec, level_db: f64) -> Result<Comparison, HarnessError> {
    compare_with(spec, level_db, RunOptions::default())
}

pub fn compare_with(spec: &ExperimentSpec, level_db: f64, options: RunOptions) -> Result<Comparison, HarnessError> {
    if spec.algorithms.len() < 2 {
        return Err(HarnessError::InvalidSpec(
            "a comparison needs at least two algorithms".into(),
        ));
    }
    let result = run_ensemble_with(spec, options)?;
    let ranking = rank(&result, level_db);
    Ok(Comparison {
        result,
        level_db,
        ranking,
    })
}

/// C `%.9e` formatting (`1.234567890e-05`).
pub fn format_sci(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:.9e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

pub fn csv_header(result: &AlgorithmResult) -> String {
    let mut header = String::from("k,fullband_n,algorithm,nmsd_db");
    if result.mean.erle_db.is_some() {
        header.push_str(",erle_db");
    }
    if result.mean.mean_steps.is_some() {
        for i in 0..result.num_subbands {
            let _ = write!(header, ",mu_{i}");
        }
    }
    header
}

pub fn algorithm_csv(result: &AlgorithmResult) -> String {
    let mean = &result.mean;
    let mut out = csv_header(result);
    out.push('\n');
    for j in 0..mean.len() {
        let _ = write!(
            out,
            "{},{},{},{}",
            mean.iterations[j],
            mean.fullband[j],
            result.name,
            format_sci(mean.nmsd_db[j])
        );
        if let Some(e) = &mean.erle_db {
            let _ = write!(out, ",{}", format_sci(e[j]));
        }
        if let Some(s) = &mean.mean_steps {
            for &mu in &s[j] {
                let _ = write!(out, ",{}", format_sci(mu));
            }
        }
        out.push('\n');
    }
    out
}

/// Everything needed to regenerate an exported result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ExperimentSpec,
    pub effective_run_length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligned_flip_sample: Option<usize>,
    pub files: Vec<ManifestFile>,
    pub seeds: Vec<SeedLineage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub algorithm: String,
    pub file: String,
    pub num_subbands: usize,
    pub steady_state_db: f64,
    pub diverged_trials: usize,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn manifest_for(result: &EnsembleResult) -> Manifest {
    Manifest {
        spec: result.spec.clone(),
        effective_run_length: result.spec.effective_run_length(),
        aligned_flip_sample: result.aligned_flip_sample,
        files: result
            .algorithms
            .iter()
            .map(|a| ManifestFile {
                algorithm: a.name.clone(),
                file: format!("{}.csv", a.name),
                num_subbands: a.num_subbands,
                steady_state_db: a.steady_state_db,
                diverged_trials: a.diverged.len(),
            })
            .collect(),
        seeds: result.seeds.clone(),
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest, HarnessError> {
    Ok(toml::from_str(text)?)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, HarnessError> {
    parse_manifest(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// Writes one CSV per algorithm plus [`MANIFEST_FILE`] into `dir`.
///
/// Files are staged under temporary names and renamed only once all of them
/// were written, so a failure leaves no partial result set behind.
pub fn export_csv(result: &EnsembleResult, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = manifest_for(result);
    let mut contents: Vec<(PathBuf, String)> = result
        .algorithms
        .iter()
        .zip(&manifest.files)
        .map(|(a, f)| (dir.join(&f.file), algorithm_csv(a)))
        .collect();
    contents.push((dir.join(MANIFEST_FILE), toml::to_string(&manifest)?));

    let mut staged = Vec::with_capacity(contents.len());
    let mut outcome = Ok(());
    for (path, text) in &contents {
        let tmp = path.with_extension("partial");
        match fs::write(&tmp, text) {
            Ok(()) => staged.push((tmp, path.clone())),
            Err(e) => {
                outcome = Err(io_err(&tmp)(e));
                break;
            }
        }
    }
    if let Err(e) = outcome {
        for (tmp, _) in &staged {
            let _ = fs::remove_file(tmp);
        }
        return Err(e);
    }
    for (tmp, path) in &staged {
        fs::rename(tmp, path).map_err(io_err(path))?;
    }
    Ok(staged.into_iter().map(|(_, p)| p).collect())
}

/// Parsed form of an exported CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub algorithm: Option<String>,
    /// Numeric columns; the `algorithm` column is dropped.
    pub rows: Vec<Vec<f64>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let numeric: Vec<&String> = self.header.iter().filter(|h| *h != "algorithm").collect();
        let j = numeric.iter().position(|h| *h == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

pub fn parse_csv(text: &str) -> Result<CsvTable, HarnessError> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or(HarnessError::Csv {
            line: 1,
            reason: "missing header".into(),
        })?
        .split(',')
        .map(str::to_string)
        .collect();
    let alg_col = header.iter().position(|h| h == "algorithm");
    let mut algorithm = None;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(HarnessError::Csv {
                line: i + 2,
                reason: format!("{} fields, header has {}", fields.len(), header.len()),
            });
        }
        let mut row = Vec::with_capacity(fields.len());
        for (j, f) in fields.iter().enumerate() {
            if Some(j) == alg_col {
                algorithm.get_or_insert_with(|| f.to_string());
                continue;
            }
            row.push(f.parse::<f64>().map_err(|_| HarnessError::Csv {
                line: i + 2,
                reason: format!("not a number: {f:?}"),
            })?);
        }
        rows.push(row);
    }
    Ok(CsvTable {
        header,
        algorithm,
        rows,
    })
}

/// Convenience constructor for the echo path used by a spec's first trial.
pub fn first_trial_path(spec: &ExperimentSpec) -> Result<EchoPath, HarnessError> {
    let signals = TrialSignals::generate(spec, 0)?;
    Ok(EchoPath::from_weights(signals.path)?)
}
