//! Gibbs samplers for the Bayesian models and the multiplicative-update
//! baseline, all producing a [`RunTrace`].

mod conditionals;
mod gibbs;
mod npnmf;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use conditionals::{
    cond_sigma2, gee_cond_w, gee_cond_z, grrn_cond_lambda, grrn_cond_mu, grrn_cond_tau,
    grrn_cond_w, grrn_cond_z, gtt_cond_w, gtt_cond_z, gttn_cond_mu, gttn_cond_tau,
    likelihood_stats_w, likelihood_stats_z, tn_conditional, FactorPrior, LikelihoodStats,
    TnConditional, GEE_EPSILON,
};
pub use gibbs::{gibbs_sweep, run_gibbs, GibbsSampler};
pub use npnmf::{run_npnmf, NPNMF_EPSILON};

use crate::error::{Error, Result};
use crate::model::{HyperParams, ObservedMatrix};

/// Model family, named likelihood-first then priors then hyperpriors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    /// Gaussian likelihood, rectified-normal priors, hierarchical hyperprior.
    #[serde(rename = "GRRN")]
    Grrn,
    /// Gaussian likelihood, exponential priors.
    #[serde(rename = "GEE")]
    Gee,
    /// Gaussian likelihood, truncated-normal priors.
    #[serde(rename = "GTT")]
    Gtt,
    /// Gaussian likelihood, truncated-normal priors, hierarchical hyperprior.
    #[serde(rename = "GTTN")]
    Gttn,
    /// Non-probabilistic NMF by masked multiplicative updates.
    #[serde(rename = "NPNMF")]
    Npnmf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Grrn,
        ModelKind::Gee,
        ModelKind::Gtt,
        ModelKind::Gttn,
        ModelKind::Npnmf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Grrn => "GRRN",
            ModelKind::Gee => "GEE",
            ModelKind::Gtt => "GTT",
            ModelKind::Gttn => "GTTN",
            ModelKind::Npnmf => "NPNMF",
        }
    }

    /// Whether the factor priors carry sampled hyperparameters.
    pub fn is_hierarchical(&self) -> bool {
        matches!(self, ModelKind::Grrn | ModelKind::Gttn)
    }

    pub fn is_bayesian(&self) -> bool {
        !matches!(self, ModelKind::Npnmf)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase().replace('-', "");
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == upper)
            .ok_or_else(|| Error::config(format!("unknown model {s:?}; expected one of GRRN, GEE, GTT, GTTN, NPNMF")))
    }
}

/// Settings of a single run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub k: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub hyper: HyperParams,
}

impl RunConfig {
    pub fn new(kind: ModelKind, k: usize, seed: u64) -> Self {
        Self {
            kind,
            k,
            iterations: 500,
            burn_in: 400,
            seed,
            hyper: HyperParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::config(format!(
                "burn-in ({}) must be smaller than iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        self.hyper.validate()
    }

    pub fn retained(&self) -> usize {
        self.iterations - self.burn_in
    }
}

/// Everything recorded about one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub kind: ModelKind,
    pub k: usize,
    pub seed: u64,
    /// Hyperparameters with `beta_lambda` pinned to its numeric value.
    pub hyper: HyperParams,
    /// Train MSE after every iteration.
    pub train_mse: Vec<f64>,
    /// Held-out MSE after every iteration, when a non-empty test set was given.
    pub test_mse: Option<Vec<f64>>,
    /// Noise variance after every iteration (NaN for NP-NMF).
    pub sigma2: Vec<f64>,
    /// Average of `WZ` over the retained iterations. NP-NMF reports its final iterate.
    pub posterior_mean: Array2<f64>,
    pub retained_samples: usize,
    pub train_mse_mean_of_samples: f64,
    pub test_mse_mean_of_samples: Option<f64>,
    pub train_mse_of_posterior_mean: f64,
    pub test_mse_of_posterior_mean: Option<f64>,
    /// Times the GEE zero-curvature guard fired.
    pub gee_clamps: u64,
}

/// Runs `config.kind` on `train`, scoring on `test` if it is given and non-empty.
pub fn run_model(config: &RunConfig, train: &ObservedMatrix, test: Option<&ObservedMatrix>) -> Result<RunTrace> {
    match config.kind {
        ModelKind::Npnmf => run_npnmf(config, train, test),
        _ => run_gibbs(config, train, test),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Checks a held-out set against the training data; an empty one counts as absent.
fn usable_test<'a>(train: &ObservedMatrix, test: Option<&'a ObservedMatrix>) -> Result<Option<&'a ObservedMatrix>> {
    match test {
        Some(t) if t.values().dim() != train.values().dim() => Err(Error::Shape(format!(
            "test set is {:?} but training set is {:?}",
            t.values().dim(),
            train.values().dim()
        ))),
        Some(t) if t.observed_count() > 0 => Ok(Some(t)),
        _ => Ok(None),
    }
}
