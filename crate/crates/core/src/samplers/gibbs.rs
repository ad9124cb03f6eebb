//! The Gibbs sweep and the run driver.
//!
//! A sweep visits, for each latent dimension `k`, every `w_mk` (followed by
//! its hyperprior variables when the model has them), then every `z_kn` in the
//! same way, and finally draws `sigma2`.
//!
//! The residual `R = A - WZ` is cached on observed cells and patched after each
//! scalar draw, so a sweep costs `O(|Omega| K)` rather than `O(|Omega| K^2)`.
//! It is recomputed from scratch before `sigma2` is drawn, which keeps
//! round-off from accumulating across sweeps.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conditionals::{
    grrn_cond_lambda, grrn_cond_mu, grrn_cond_tau, sigma2_from_sse, tn_conditional, FactorPrior,
    LikelihoodStats,
};
use super::{mean, usable_test, ModelKind, RunConfig, RunTrace};
use crate::distributions::{
    floor_positive, sample_exponential, sample_gamma, sample_inverse_gamma, sample_tn, GammaParams,
    GaussianParams, InvGammaParams, TnParams,
};
use crate::error::{Error, Result};
use crate::model::{masked_mse, FactorState, HyperParams, ObservedMatrix, PriorState};

/// Observed cells in row-major order, plus a column-major view onto them.
#[derive(Debug, Clone)]
pub(crate) struct ObservedIndex {
    pub(crate) n_rows: usize,
    pub(crate) n_cols: usize,
    pub(crate) row_ptr: Vec<usize>,
    pub(crate) row_cols: Vec<usize>,
    pub(crate) values: Vec<f64>,
    pub(crate) col_ptr: Vec<usize>,
    pub(crate) col_rows: Vec<usize>,
    pub(crate) col_entries: Vec<usize>,
}

impl ObservedIndex {
    pub(crate) fn new(data: &ObservedMatrix) -> Self {
        let (n_rows, n_cols) = (data.n_rows(), data.n_cols());
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut row_cols = Vec::with_capacity(data.observed_count());
        let mut values = Vec::with_capacity(data.observed_count());
        let mut col_counts = vec![0usize; n_cols];
        row_ptr.push(0);
        for i in 0..n_rows {
            for j in 0..n_cols {
                if data.is_observed(i, j) {
                    row_cols.push(j);
                    values.push(data.values()[[i, j]]);
                    col_counts[j] += 1;
                }
            }
            row_ptr.push(row_cols.len());
        }
        let mut col_ptr = Vec::with_capacity(n_cols + 1);
        col_ptr.push(0);
        for c in &col_counts {
            col_ptr.push(col_ptr.last().unwrap() + c);
        }
        let mut fill = col_ptr.clone();
        let mut col_rows = vec![0; row_cols.len()];
        let mut col_entries = vec![0; row_cols.len()];
        for i in 0..n_rows {
            for e in row_ptr[i]..row_ptr[i + 1] {
                let j = row_cols[e];
                col_rows[fill[j]] = i;
                col_entries[fill[j]] = e;
                fill[j] += 1;
            }
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            row_cols,
            values,
            col_ptr,
            col_rows,
            col_entries,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.values.len()
    }
}

fn numerical(variable: &'static str, row: usize, col: usize) -> impl FnOnce(String) -> Error {
    move |detail| Error::Numerical {
        variable,
        row,
        col,
        detail,
    }
}

/// Prior on entry `(r, c)` of one factor as currently parameterized.
#[inline]
fn factor_prior(kind: ModelKind, mu: f64, tau: f64, lambda: f64) -> FactorPrior {
    match kind {
        ModelKind::Grrn => FactorPrior::rectified(mu, tau, lambda),
        ModelKind::Gee => FactorPrior::Exponential { rate: lambda },
        _ => FactorPrior::TruncatedNormal {
            mean: mu,
            precision: tau,
        },
    }
}

fn sample_prior<R: Rng + ?Sized>(prior: FactorPrior, rng: &mut R) -> Result<f64> {
    match prior {
        FactorPrior::Exponential { rate } => Ok(sample_exponential(rate, rng)),
        FactorPrior::TruncatedNormal { mean, precision } => {
            Ok(sample_tn(&TnParams::new(mean, precision)?, rng))
        }
    }
}

/// Draws `mu`, then `tau` (given the new `mu`), then `lambda` for GRRN.
#[inline]
fn update_hyperprior<R: Rng + ?Sized>(
    kind: ModelKind,
    hyper: &HyperParams,
    x: f64,
    mu: &mut f64,
    tau: &mut f64,
    lambda: &mut f64,
    rng: &mut R,
) -> Result<()> {
    *mu = grrn_cond_mu(x, *tau, hyper).sample(rng);
    *tau = floor_positive(sample_gamma(&grrn_cond_tau(x, *mu, hyper), rng));
    if kind == ModelKind::Grrn {
        *lambda = floor_positive(sample_gamma(&grrn_cond_lambda(x, hyper)?, rng));
    }
    Ok(())
}

/// Residual cache bound to one data set.
#[derive(Debug, Clone)]
struct Engine {
    index: ObservedIndex,
    residual: Vec<f64>,
}

impl Engine {
    fn new(data: &ObservedMatrix, state: &FactorState) -> Self {
        let index = ObservedIndex::new(data);
        let mut engine = Self {
            residual: vec![0.0; index.len()],
            index,
        };
        engine.recompute_residual(state);
        engine
    }

    fn recompute_residual(&mut self, state: &FactorState) {
        let k = state.k();
        let n = self.index.n_cols;
        let w = state.w.as_slice().expect("standard layout");
        let z = state.z.as_slice().expect("standard layout");
        for i in 0..self.index.n_rows {
            let wi = &w[i * k..(i + 1) * k];
            for e in self.index.row_ptr[i]..self.index.row_ptr[i + 1] {
                let j = self.index.row_cols[e];
                let mut pred = 0.0;
                for (l, &wil) in wi.iter().enumerate() {
                    pred += wil * z[l * n + j];
                }
                self.residual[e] = self.index.values[e] - pred;
            }
        }
    }

    fn sse(&self) -> f64 {
        self.residual.iter().map(|r| r * r).sum()
    }

    fn sweep<R: Rng + ?Sized>(
        &mut self,
        kind: ModelKind,
        hyper: &HyperParams,
        state: &mut FactorState,
        prior: &mut PriorState,
        rng: &mut R,
    ) -> Result<u64> {
        let kk = state.k();
        let (mm, nn) = (self.index.n_rows, self.index.n_cols);
        let sigma2 = state.sigma2;
        let hierarchical = kind.is_hierarchical();
        let mut clamps = 0u64;

        let w = state.w.as_slice_mut().expect("standard layout");
        let z = state.z.as_slice_mut().expect("standard layout");
        let idx = &self.index;
        let residual = &mut self.residual;

        for k in 0..kk {
            for m in 0..mm {
                let at = m * kk + k;
                let old = w[at];
                let entries = idx.row_ptr[m]..idx.row_ptr[m + 1];
                let mut stats = LikelihoodStats::default();
                for e in entries.clone() {
                    let zkj = z[k * nn + idx.row_cols[e]];
                    stats.sum_sq += zkj * zkj;
                    stats.sum_cross += zkj * (residual[e] + old * zkj);
                }
                let p = factor_prior(kind, prior.mu_w[[m, k]], prior.tau_w[[m, k]], prior.lambda_w[[m, k]]);
                let cond = tn_conditional(stats, sigma2, p).map_err(numerical("w", m, k))?;
                clamps += cond.clamped as u64;
                let new = sample_tn(&cond.params, rng);
                let delta = new - old;
                if delta != 0.0 {
                    for e in entries {
                        residual[e] -= delta * z[k * nn + idx.row_cols[e]];
                    }
                }
                w[at] = new;
                if hierarchical {
                    let (mu, tau, lambda) = (
                        &mut prior.mu_w[[m, k]],
                        &mut prior.tau_w[[m, k]],
                        &mut prior.lambda_w[[m, k]],
                    );
                    update_hyperprior(kind, hyper, new, mu, tau, lambda, rng)?;
                }
            }
            for n in 0..nn {
                let at = k * nn + n;
                let old = z[at];
                let entries = idx.col_ptr[n]..idx.col_ptr[n + 1];
                let mut stats = LikelihoodStats::default();
                for c in entries.clone() {
                    let wik = w[idx.col_rows[c] * kk + k];
                    stats.sum_sq += wik * wik;
                    stats.sum_cross += wik * (residual[idx.col_entries[c]] + old * wik);
                }
                let p = factor_prior(kind, prior.mu_z[[k, n]], prior.tau_z[[k, n]], prior.lambda_z[[k, n]]);
                let cond = tn_conditional(stats, sigma2, p).map_err(numerical("z", k, n))?;
                clamps += cond.clamped as u64;
                let new = sample_tn(&cond.params, rng);
                let delta = new - old;
                if delta != 0.0 {
                    for c in entries {
                        residual[idx.col_entries[c]] -= delta * w[idx.col_rows[c] * kk + k];
                    }
                }
                z[at] = new;
                if hierarchical {
                    let (mu, tau, lambda) = (
                        &mut prior.mu_z[[k, n]],
                        &mut prior.tau_z[[k, n]],
                        &mut prior.lambda_z[[k, n]],
                    );
                    update_hyperprior(kind, hyper, new, mu, tau, lambda, rng)?;
                }
            }
        }

        self.recompute_residual(state);
        let sse = self.sse();
        if !sse.is_finite() {
            return Err(Error::Numerical {
                variable: "sigma2",
                row: 0,
                col: 0,
                detail: format!("residual sum of squares is {sse}"),
            });
        }
        let posterior = sigma2_from_sse(sse, self.index.len(), hyper);
        state.sigma2 = floor_positive(sample_inverse_gamma(&posterior, rng));
        Ok(clamps)
    }
}

fn check_kind(kind: ModelKind) -> Result<()> {
    if kind.is_bayesian() {
        Ok(())
    } else {
        Err(Error::config(format!("{kind} is not a Gibbs-sampled model")))
    }
}

fn standard(mut state: FactorState) -> FactorState {
    if !state.w.is_standard_layout() {
        state.w = state.w.as_standard_layout().into_owned();
    }
    if !state.z.is_standard_layout() {
        state.z = state.z.as_standard_layout().into_owned();
    }
    state
}

fn check_data(data: &ObservedMatrix, state: &FactorState, prior: &PriorState) -> Result<()> {
    if data.observed_count() == 0 {
        return Err(Error::domain("training data has no observed entries"));
    }
    if state.w.nrows() != data.n_rows() || state.z.ncols() != data.n_cols() {
        return Err(Error::Shape(format!(
            "factors {:?} / {:?} do not match data {}x{}",
            state.w.dim(),
            state.z.dim(),
            data.n_rows(),
            data.n_cols()
        )));
    }
    prior.check_shape(state)
}

/// One full sweep over `state` and `prior`. Returns how often the GEE variance
/// guard fired.
///
/// `hyper` must already have `beta_lambda` resolved when `kind` is GRRN.
/// For GEE and GTT the prior state is read but never changed: GEE takes its
/// rates from `lambda_*`, GTT its means and precisions from `mu_*`/`tau_*`.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    kind: ModelKind,
    state: &mut FactorState,
    prior: &mut PriorState,
    data: &ObservedMatrix,
    hyper: &HyperParams,
    rng: &mut R,
) -> Result<u64> {
    check_kind(kind)?;
    check_data(data, state, prior)?;
    *state = standard(state.clone());
    let mut engine = Engine::new(data, state);
    engine.sweep(kind, hyper, state, prior, rng)
}

/// Draws hyperprior variables from their priors, then factors from the
/// resulting priors, then `sigma2`.
fn initialize<R: Rng + ?Sized>(
    kind: ModelKind,
    k: usize,
    hyper: &HyperParams,
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<(FactorState, PriorState)> {
    let mut prior = match kind {
        ModelKind::Gee => PriorState::constant(m, n, k, 0.0, 0.0, hyper.gee_lambda),
        ModelKind::Gtt => PriorState::constant(m, n, k, hyper.gtt_mu, hyper.gtt_tau, 0.0),
        _ => PriorState::constant(m, n, k, 0.0, 0.0, 0.0),
    };
    if kind.is_hierarchical() {
        let mu_prior = GaussianParams::new(hyper.mu_mu, hyper.tau_mu)?;
        let tau_prior = GammaParams::new(hyper.a, hyper.b)?;
        let lambda_prior = GammaParams::new(hyper.alpha_lambda, hyper.beta_lambda_value().unwrap_or(1.0))?;
        let sides = [
            (&mut prior.mu_w, &mut prior.tau_w, &mut prior.lambda_w),
            (&mut prior.mu_z, &mut prior.tau_z, &mut prior.lambda_z),
        ];
        for (mus, taus, lambdas) in sides {
            for ((mu, tau), lambda) in mus.iter_mut().zip(taus.iter_mut()).zip(lambdas.iter_mut()) {
                *mu = mu_prior.sample(rng);
                *tau = floor_positive(sample_gamma(&tau_prior, rng));
                if kind == ModelKind::Grrn {
                    *lambda = floor_positive(sample_gamma(&lambda_prior, rng));
                }
            }
        }
    }
    let mut w = Array2::zeros((m, k));
    for ((x, &mu), (&tau, &lambda)) in w
        .iter_mut()
        .zip(prior.mu_w.iter())
        .zip(prior.tau_w.iter().zip(prior.lambda_w.iter()))
    {
        *x = sample_prior(factor_prior(kind, mu, tau, lambda), rng)?;
    }
    let mut z = Array2::zeros((k, n));
    for ((x, &mu), (&tau, &lambda)) in z
        .iter_mut()
        .zip(prior.mu_z.iter())
        .zip(prior.tau_z.iter().zip(prior.lambda_z.iter()))
    {
        *x = sample_prior(factor_prior(kind, mu, tau, lambda), rng)?;
    }
    let sigma2_prior = InvGammaParams::new(hyper.alpha_sigma, hyper.beta_sigma)?;
    let sigma2 = floor_positive(sample_inverse_gamma(&sigma2_prior, rng));
    Ok((FactorState::new(w, z, sigma2)?, prior))
}

/// A Gibbs chain over one training set.
#[derive(Debug, Clone)]
pub struct GibbsSampler {
    kind: ModelKind,
    hyper: HyperParams,
    engine: Engine,
    state: FactorState,
    prior: PriorState,
    rng: ChaCha8Rng,
    gee_clamps: u64,
}

impl GibbsSampler {
    /// Starts a chain from random draws of the priors.
    pub fn new(kind: ModelKind, k: usize, hyper: &HyperParams, train: &ObservedMatrix, seed: u64) -> Result<Self> {
        check_kind(kind)?;
        if k == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if train.observed_count() == 0 {
            return Err(Error::domain("training data has no observed entries"));
        }
        let hyper = hyper.resolved(train, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, prior) = initialize(kind, k, &hyper, train.n_rows(), train.n_cols(), &mut rng)?;
        let engine = Engine::new(train, &state);
        Ok(Self {
            kind,
            hyper,
            engine,
            state,
            prior,
            rng,
            gee_clamps: 0,
        })
    }

    /// Starts a chain from a given state.
    pub fn from_parts(
        kind: ModelKind,
        hyper: &HyperParams,
        train: &ObservedMatrix,
        state: FactorState,
        prior: PriorState,
        seed: u64,
    ) -> Result<Self> {
        check_kind(kind)?;
        check_data(train, &state, &prior)?;
        let hyper = hyper.resolved(train, state.k())?;
        let state = standard(state);
        let engine = Engine::new(train, &state);
        Ok(Self {
            kind,
            hyper,
            engine,
            state,
            prior,
            rng: ChaCha8Rng::seed_from_u64(seed),
            gee_clamps: 0,
        })
    }

    pub fn sweep(&mut self) -> Result<()> {
        let clamps = self
            .engine
            .sweep(self.kind, &self.hyper, &mut self.state, &mut self.prior, &mut self.rng)?;
        self.gee_clamps += clamps;
        Ok(())
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn state(&self) -> &FactorState {
        &self.state
    }

    pub fn prior(&self) -> &PriorState {
        &self.prior
    }

    /// Hyperparameters with `beta_lambda` resolved.
    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn gee_clamps(&self) -> u64 {
        self.gee_clamps
    }

    /// MSE of the current `WZ` on the training cells.
    pub fn train_mse(&self) -> f64 {
        self.engine.sse() / self.engine.index.len() as f64
    }
}

/// Held-out cells as a flat list, scored against the current factors.
pub(crate) struct TestCells {
    cells: Vec<(usize, usize, f64)>,
}

impl TestCells {
    pub(crate) fn new(test: &ObservedMatrix) -> Self {
        Self {
            cells: test.observed().collect(),
        }
    }

    pub(crate) fn mse(&self, state: &FactorState) -> f64 {
        let k = state.k();
        let sse: f64 = self
            .cells
            .iter()
            .map(|&(i, j, a)| {
                let mut p = 0.0;
                for l in 0..k {
                    p += state.w[[i, l]] * state.z[[l, j]];
                }
                (a - p) * (a - p)
            })
            .sum();
        sse / self.cells.len() as f64
    }
}

/// Runs `config.iterations` sweeps, recording per-iteration MSEs and
/// averaging `WZ` over the iterations after burn-in.
pub fn run_gibbs(config: &RunConfig, train: &ObservedMatrix, test: Option<&ObservedMatrix>) -> Result<RunTrace> {
    config.validate()?;
    check_kind(config.kind)?;
    let test = usable_test(train, test)?;
    let mut sampler = GibbsSampler::new(config.kind, config.k, &config.hyper, train, config.seed)?;
    let test_cells = test.map(TestCells::new);

    let mut train_mse = Vec::with_capacity(config.iterations);
    let mut test_mse = test_cells.as_ref().map(|_| Vec::with_capacity(config.iterations));
    let mut sigma2 = Vec::with_capacity(config.iterations);
    let mut sum = Array2::<f64>::zeros((train.n_rows(), train.n_cols()));

    for it in 0..config.iterations {
        sampler.sweep()?;
        train_mse.push(sampler.train_mse());
        sigma2.push(sampler.state.sigma2);
        if let (Some(cells), Some(out)) = (&test_cells, test_mse.as_mut()) {
            out.push(cells.mse(&sampler.state));
        }
        if it >= config.burn_in {
            general_mat_mul(1.0, &sampler.state.w, &sampler.state.z, 1.0, &mut sum);
        }
    }

    let retained = config.retained();
    let posterior_mean = sum / retained as f64;
    let train_mse_of_posterior_mean = masked_mse(train, &posterior_mean, None)?;
    let test_mse_of_posterior_mean = test.map(|t| masked_mse(t, &posterior_mean, None)).transpose()?;
    Ok(RunTrace {
        kind: config.kind,
        k: config.k,
        seed: config.seed,
        hyper: sampler.hyper,
        train_mse_mean_of_samples: mean(&train_mse[config.burn_in..]),
        test_mse_mean_of_samples: test_mse.as_ref().map(|t| mean(&t[config.burn_in..])),
        train_mse,
        test_mse,
        sigma2,
        posterior_mean,
        retained_samples: retained,
        train_mse_of_posterior_mean,
        test_mse_of_posterior_mean,
        gee_clamps: sampler.gee_clamps,
    })
}
