//! Experiment sweeps: convergence curves, noise sensitivity and held-out
//! prediction under increasing sparsity.
//!
//! Each (model, K, level, repeat) cell is an independent job with its own
//! seed, run on a rayon pool. Results come back in job order, so the output
//! does not depend on scheduling.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{add_noise, split_by_count, split_train_test, SplitSpec};
use crate::error::{Error, Result};
use crate::model::{masked_mse, ObservedMatrix};
use crate::samplers::{run_model, ModelKind, RunConfig};

/// Held-out MSE above this (or non-finite) marks a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Convergence,
    Noise,
    Sparsity,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Noise => "noise",
            ExperimentKind::Sparsity => "sparsity",
        }
    }
}

/// A sweep over models, latent dimensions and levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub models: Vec<ModelKind>,
    pub ks: Vec<usize>,
    /// Fractions unobserved (sparsity) or noise-to-signal ratios (noise).
    /// Ignored by convergence runs.
    pub levels: Vec<f64>,
    pub repeats: usize,
    /// Iterations, burn-in, base seed and hyperparameters; `kind` and `k` are
    /// overwritten per cell.
    pub base: RunConfig,
    /// Share of observed cells held out for scoring in the noise experiment.
    pub noise_holdout: f64,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, models: Vec<ModelKind>, ks: Vec<usize>, levels: Vec<f64>, base: RunConfig) -> Self {
        Self {
            kind,
            models,
            ks,
            levels,
            repeats: 10,
            base,
            noise_holdout: 0.1,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.ks.is_empty() {
            return Err(Error::config("experiment needs at least one model and one K"));
        }
        if self.kind != ExperimentKind::Convergence && self.levels.is_empty() {
            return Err(Error::config(format!("{} experiment needs at least one level", self.kind.name())));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if self.ks.contains(&0) {
            return Err(Error::config("K must be at least 1"));
        }
        match self.kind {
            ExperimentKind::Sparsity => {
                if let Some(f) = self.levels.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
                    return Err(Error::config(format!("fraction unobserved must be in (0, 1), got {f}")));
                }
            }
            ExperimentKind::Noise => {
                if let Some(r) = self.levels.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
                    return Err(Error::config(format!("noise ratio must be >= 0, got {r}")));
                }
                if !(self.noise_holdout > 0.0 && self.noise_holdout < 1.0) {
                    return Err(Error::config(format!("noise holdout must be in (0, 1), got {}", self.noise_holdout)));
                }
            }
            ExperimentKind::Convergence => {}
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be at least 1"));
        }
        self.base.validate()
    }

    fn levels(&self) -> Vec<Option<f64>> {
        match self.kind {
            ExperimentKind::Convergence => vec![None],
            _ => self.levels.iter().copied().map(Some).collect(),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0u64, |h, &p| splitmix64(h ^ p))
}

fn level_bits(level: Option<f64>) -> u64 {
    level.map_or(u64::MAX, f64::to_bits)
}

/// Chain seed of one cell.
pub fn cell_seed(base: u64, model: ModelKind, k: usize, level: Option<f64>, repeat: usize) -> u64 {
    mix(&[1, base, model as u64, k as u64, level_bits(level), repeat as u64])
}

/// Seed of the data split (or noise draw) of one (level, repeat); shared by
/// every model and K so they see the same data.
pub fn data_seed(base: u64, level: Option<f64>, repeat: usize) -> u64 {
    mix(&[2, base, level_bits(level), repeat as u64])
}

/// Summary of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub experiment: ExperimentKind,
    pub model: ModelKind,
    pub k: usize,
    pub level: Option<f64>,
    pub repeat: usize,
    /// Chain seed.
    pub seed: u64,
    /// Seed of the train/test split, when there is one.
    pub split_seed: Option<u64>,
    /// Seed of the injected noise (noise experiment).
    pub noise_seed: Option<u64>,
    pub train_mse_mean_of_samples: Option<f64>,
    pub train_mse_of_posterior_mean: Option<f64>,
    pub test_mse_mean_of_samples: Option<f64>,
    /// Headline metric; `None` when there is no held-out set.
    pub test_mse_of_posterior_mean: Option<f64>,
    /// Noise experiment: observed variance of the clean data over the held-out
    /// MSE against the noised values.
    pub variance_ratio: Option<f64>,
    /// As `variance_ratio`, scored against the clean held-out values.
    pub variance_ratio_clean: Option<f64>,
    pub diverged: bool,
    pub gee_clamps: u64,
    /// Why the run failed, when it did.
    pub error: Option<String>,
    /// Per-iteration train MSE (convergence runs only).
    pub curve: Option<Vec<f64>>,
    pub wall_seconds: f64,
}

impl CellResult {
    fn empty(spec: &ExperimentSpec, job: &Job) -> Self {
        Self {
            experiment: spec.kind,
            model: job.model,
            k: job.k,
            level: job.level,
            repeat: job.repeat,
            seed: job.seed,
            split_seed: None,
            noise_seed: None,
            train_mse_mean_of_samples: None,
            train_mse_of_posterior_mean: None,
            test_mse_mean_of_samples: None,
            test_mse_of_posterior_mean: None,
            variance_ratio: None,
            variance_ratio_clean: None,
            diverged: false,
            gee_clamps: 0,
            error: None,
            curve: None,
            wall_seconds: 0.0,
        }
    }

    /// The value that is aggregated and checked for divergence: held-out MSE
    /// where there is a held-out set, otherwise train MSE.
    pub fn score(&self) -> Option<f64> {
        self.test_mse_of_posterior_mean.or(self.train_mse_mean_of_samples)
    }
}

/// Mean and sample standard deviation of a cell's repeats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Zero for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

/// Repeats of one (model, K, level) pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub experiment: ExperimentKind,
    pub model: ModelKind,
    pub k: usize,
    pub level: Option<f64>,
    pub repeats: usize,
    /// Repeats that finished without error.
    pub completed: usize,
    pub diverged: usize,
    pub train_mse_mean_of_samples: Option<Stat>,
    pub test_mse_of_posterior_mean: Option<Stat>,
    pub variance_ratio: Option<Stat>,
    pub variance_ratio_clean: Option<Stat>,
}

/// Mean train-MSE curve of one (model, K).
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub model: ModelKind,
    pub k: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    /// Every cell in (model, K, level, repeat) order.
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
    /// Convergence runs only.
    pub curves: Vec<Curve>,
}

impl ExperimentResult {
    /// Cells that ended in an error rather than a result.
    pub fn failures(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.error.is_some())
    }

    pub fn aggregate(&self, model: ModelKind, k: usize, level: Option<f64>) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.model == model && a.k == k && a.level == level)
    }
}

/// Groups cells by (model, K, level) in first-seen order and summarizes each
/// group. Runs that failed are counted but contribute no values.
pub fn aggregate(cells: &[CellResult]) -> Vec<Aggregate> {
    let mut keys: Vec<(ExperimentKind, ModelKind, usize, Option<f64>)> = Vec::new();
    for c in cells {
        let key = (c.experiment, c.model, c.k, c.level);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(experiment, model, k, level)| {
            let group: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.model == model && c.k == k && c.level == level && c.experiment == experiment)
                .collect();
            let collect = |f: fn(&CellResult) -> Option<f64>| -> Option<Stat> {
                let xs: Vec<f64> = group.iter().filter_map(|c| f(c)).collect();
                Stat::of(&xs)
            };
            Aggregate {
                experiment,
                model,
                k,
                level,
                repeats: group.len(),
                completed: group.iter().filter(|c| c.error.is_none()).count(),
                diverged: group.iter().filter(|c| c.diverged).count(),
                train_mse_mean_of_samples: collect(|c| c.train_mse_mean_of_samples),
                test_mse_of_posterior_mean: collect(|c| c.test_mse_of_posterior_mean),
                variance_ratio: collect(|c| c.variance_ratio),
                variance_ratio_clean: collect(|c| c.variance_ratio_clean),
            }
        })
        .collect()
}

fn curves(cells: &[CellResult]) -> Vec<Curve> {
    let mut keys: Vec<(ModelKind, usize)> = Vec::new();
    for c in cells {
        if c.curve.is_some() && !keys.contains(&(c.model, c.k)) {
            keys.push((c.model, c.k));
        }
    }
    keys.into_iter()
        .map(|(model, k)| {
            let runs: Vec<&Vec<f64>> = cells
                .iter()
                .filter(|c| c.model == model && c.k == k)
                .filter_map(|c| c.curve.as_ref())
                .collect();
            let len = runs.iter().map(|r| r.len()).min().unwrap_or(0);
            let stats: Vec<Stat> = (0..len)
                .map(|i| Stat::of(&runs.iter().map(|r| r[i]).collect::<Vec<_>>()).expect("at least one run"))
                .collect();
            Curve {
                model,
                k,
                mean: stats.iter().map(|s| s.mean).collect(),
                std: stats.iter().map(|s| s.std).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Job {
    model: ModelKind,
    k: usize,
    level: Option<f64>,
    repeat: usize,
    seed: u64,
}

fn jobs(spec: &ExperimentSpec) -> Vec<Job> {
    let mut out = Vec::new();
    for &model in &spec.models {
        for &k in &spec.ks {
            for level in spec.levels() {
                for repeat in 0..spec.repeats {
                    out.push(Job {
                        model,
                        k,
                        level,
                        repeat,
                        seed: cell_seed(spec.base.seed, model, k, level, repeat),
                    });
                }
            }
        }
    }
    out
}

fn is_diverged(x: f64) -> bool {
    !x.is_finite() || x > DIVERGENCE_THRESHOLD
}

fn run_job(spec: &ExperimentSpec, data: &ObservedMatrix, clean_variance: f64, job: &Job) -> CellResult {
    let start = Instant::now();
    let mut cell = CellResult::empty(spec, job);
    if let Err(e) = fill_cell(spec, data, clean_variance, job, &mut cell) {
        cell.error = Some(e.to_string());
        cell.diverged = true;
    }
    cell.wall_seconds = start.elapsed().as_secs_f64();
    cell
}

fn fill_cell(spec: &ExperimentSpec, data: &ObservedMatrix, clean_variance: f64, job: &Job, cell: &mut CellResult) -> Result<()> {
    let config = RunConfig {
        kind: job.model,
        k: job.k,
        seed: job.seed,
        ..spec.base
    };
    let base_seed = spec.base.seed;
    match spec.kind {
        ExperimentKind::Convergence => {
            let trace = run_model(&config, data, None)?;
            cell.train_mse_mean_of_samples = Some(trace.train_mse_mean_of_samples);
            cell.train_mse_of_posterior_mean = Some(trace.train_mse_of_posterior_mean);
            cell.diverged = is_diverged(trace.train_mse_mean_of_samples);
            cell.gee_clamps = trace.gee_clamps;
            cell.curve = Some(trace.train_mse);
        }
        ExperimentKind::Sparsity => {
            let fraction = job.level.expect("sparsity cells carry a fraction");
            let split = SplitSpec {
                fraction_unobserved: fraction,
                seed: data_seed(base_seed, job.level, job.repeat),
            };
            cell.split_seed = Some(split.seed);
            let (train, test) = split_train_test(data, &split)?;
            let trace = run_model(&config, &train, Some(&test))?;
            cell.train_mse_mean_of_samples = Some(trace.train_mse_mean_of_samples);
            cell.train_mse_of_posterior_mean = Some(trace.train_mse_of_posterior_mean);
            cell.test_mse_mean_of_samples = trace.test_mse_mean_of_samples;
            cell.test_mse_of_posterior_mean = trace.test_mse_of_posterior_mean;
            cell.diverged = trace.test_mse_of_posterior_mean.is_some_and(is_diverged);
            cell.gee_clamps = trace.gee_clamps;
        }
        ExperimentKind::Noise => {
            let ratio = job.level.expect("noise cells carry a ratio");
            let noise_seed = data_seed(base_seed, job.level, job.repeat);
            // The same cells are held out at every ratio.
            let split_seed = data_seed(base_seed, None, job.repeat);
            cell.noise_seed = Some(noise_seed);
            cell.split_seed = Some(split_seed);
            let noisy = add_noise(data, ratio, noise_seed)?;
            let n_train = ((1.0 - spec.noise_holdout) * data.observed_count() as f64).round() as usize;
            let (train, test) = split_by_count(&noisy, n_train, split_seed)?;
            let trace = run_model(&config, &train, Some(&test))?;
            let mse = trace
                .test_mse_of_posterior_mean
                .ok_or_else(|| Error::domain("noise experiment held out no cells"))?;
            let clean_test = data.with_mask(test.mask().clone())?;
            let clean_mse = masked_mse(&clean_test, &trace.posterior_mean, None)?;
            cell.train_mse_mean_of_samples = Some(trace.train_mse_mean_of_samples);
            cell.train_mse_of_posterior_mean = Some(trace.train_mse_of_posterior_mean);
            cell.test_mse_mean_of_samples = trace.test_mse_mean_of_samples;
            cell.test_mse_of_posterior_mean = Some(mse);
            cell.variance_ratio = Some(clean_variance / mse);
            cell.variance_ratio_clean = Some(clean_variance / clean_mse);
            cell.diverged = is_diverged(mse);
            cell.gee_clamps = trace.gee_clamps;
        }
    }
    Ok(())
}

fn run(spec: &ExperimentSpec, data: &ObservedMatrix, expected: ExperimentKind) -> Result<ExperimentResult> {
    if spec.kind != expected {
        return Err(Error::config(format!(
            "expected a {} spec, got {}",
            expected.name(),
            spec.kind.name()
        )));
    }
    spec.validate()?;
    if data.observed_count() == 0 {
        return Err(Error::domain("dataset has no observed entries"));
    }
    let clean_variance = data.observed_variance()?;
    let jobs = jobs(spec);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = spec.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let cells: Vec<CellResult> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let cell = run_job(spec, data, clean_variance, job);
                log::info!(
                    "{} {} K={} level={:?} repeat={} score={:?} ({:.1}s)",
                    spec.kind.name(),
                    job.model,
                    job.k,
                    job.level,
                    job.repeat,
                    cell.score(),
                    cell.wall_seconds
                );
                cell
            })
            .collect()
    });
    Ok(ExperimentResult {
        kind: spec.kind,
        aggregates: aggregate(&cells),
        curves: curves(&cells),
        cells,
    })
}

/// Fits every (model, K) on all observed cells and records train-MSE curves.
pub fn run_convergence(spec: &ExperimentSpec, data: &ObservedMatrix) -> Result<ExperimentResult> {
    run(spec, data, ExperimentKind::Convergence)
}

/// For each noise ratio: noises the data, holds out `noise_holdout` of the
/// observed cells, fits on the rest and reports variance over held-out MSE.
pub fn run_noise(spec: &ExperimentSpec, data: &ObservedMatrix) -> Result<ExperimentResult> {
    run(spec, data, ExperimentKind::Noise)
}

/// For each fraction unobserved: splits, fits on train and scores the
/// posterior-mean prediction on the held-out cells.
pub fn run_sparsity(spec: &ExperimentSpec, data: &ObservedMatrix) -> Result<ExperimentResult> {
    run(spec, data, ExperimentKind::Sparsity)
}

/// Dispatches on `spec.kind`.
pub fn run_experiment(spec: &ExperimentSpec, data: &ObservedMatrix) -> Result<ExperimentResult> {
    run(spec, data, spec.kind)
}
