//! Masked data matrices, factor state, hyperparameters and the loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A partially observed `M x N` matrix: dense values plus a dense mask.
///
/// Values at unobserved cells are carried along but never read by any
/// computation in this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMatrix {
    values: Array2<f64>,
    mask: Array2<bool>,
    observed_count: usize,
}

impl ObservedMatrix {
    pub fn new(values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::Shape(format!(
                "values are {:?} but mask is {:?}",
                values.dim(),
                mask.dim()
            )));
        }
        let observed_count = mask.iter().filter(|&&m| m).count();
        Ok(Self {
            values,
            mask,
            observed_count,
        })
    }

    /// Every cell observed.
    pub fn fully_observed(values: Array2<f64>) -> Self {
        let mask = Array2::from_elem(values.dim(), true);
        let observed_count = values.len();
        Self {
            values,
            mask,
            observed_count,
        }
    }

    /// Builds from `(row, col, value)` triples on an `n_rows x n_cols` grid.
    /// Later triples overwrite earlier ones at the same cell.
    pub fn from_triples(
        n_rows: usize,
        n_cols: usize,
        triples: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut values = Array2::zeros((n_rows, n_cols));
        let mut mask = Array2::from_elem((n_rows, n_cols), false);
        for (i, j, v) in triples {
            if i >= n_rows || j >= n_cols {
                return Err(Error::Shape(format!(
                    "cell ({i}, {j}) outside {n_rows}x{n_cols}"
                )));
            }
            values[[i, j]] = v;
            mask[[i, j]] = true;
        }
        Self::new(values, mask)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn observed_count(&self) -> usize {
        self.observed_count
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]]
    }

    /// Observed fraction of the full grid.
    pub fn density(&self) -> f64 {
        self.observed_count as f64 / (self.n_rows() * self.n_cols()) as f64
    }

    /// Observed cells in row-major order.
    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values
            .indexed_iter()
            .zip(self.mask.iter())
            .filter(|(_, &m)| m)
            .map(|(((i, j), &v), _)| (i, j, v))
    }

    pub fn observed_values(&self) -> Vec<f64> {
        self.observed().map(|(_, _, v)| v).collect()
    }

    /// Mean of observed values (`m0`).
    pub fn observed_mean(&self) -> Result<f64> {
        if self.observed_count == 0 {
            return Err(Error::domain("no observed entries"));
        }
        Ok(self.observed().map(|(_, _, v)| v).sum::<f64>() / self.observed_count as f64)
    }

    /// Population variance of observed values.
    pub fn observed_variance(&self) -> Result<f64> {
        let mean = self.observed_mean()?;
        Ok(self
            .observed()
            .map(|(_, _, v)| (v - mean) * (v - mean))
            .sum::<f64>()
            / self.observed_count as f64)
    }

    /// Same values restricted to a narrower mask.
    pub fn with_mask(&self, mask: Array2<bool>) -> Result<Self> {
        Self::new(self.values.clone(), mask)
    }

    pub(crate) fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }
}

/// Current factor matrices and noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    /// `M x K`
    pub w: Array2<f64>,
    /// `K x N`
    pub z: Array2<f64>,
    pub sigma2: f64,
}

impl FactorState {
    pub fn new(w: Array2<f64>, z: Array2<f64>, sigma2: f64) -> Result<Self> {
        if w.ncols() != z.nrows() {
            return Err(Error::Shape(format!(
                "W is {:?} but Z is {:?}",
                w.dim(),
                z.dim()
            )));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::domain(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(Self { w, z, sigma2 })
    }

    pub fn k(&self) -> usize {
        self.w.ncols()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.w.iter().chain(self.z.iter()).all(|&x| x >= 0.0)
    }
}

/// Rule for the GRRN exponential-rate hyperparameter `beta_lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaLambda {
    /// `scale * sqrt(m0 / K)` with `m0` the mean of the training entries.
    /// `scale = 1` is the uninformative default; 20 and 0.1 give the stronger
    /// regularization variants.
    Uninformative { scale: f64 },
    Fixed(f64),
}

impl Default for BetaLambda {
    fn default() -> Self {
        BetaLambda::Uninformative { scale: 1.0 }
    }
}

impl BetaLambda {
    pub fn resolve(&self, observed_mean: f64, k: usize) -> Result<f64> {
        let value = match *self {
            BetaLambda::Uninformative { scale } => {
                if observed_mean < 0.0 {
                    return Err(Error::domain(format!(
                        "sqrt(m0/K) needs a nonnegative mean, got {observed_mean}"
                    )));
                }
                scale * (observed_mean / k as f64).sqrt()
            }
            BetaLambda::Fixed(v) => v,
        };
        if value > 0.0 && value.is_finite() {
            Ok(value)
        } else {
            Err(Error::domain(format!("beta_lambda must be > 0, got {value}")))
        }
    }
}

/// Top-level constants of every model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Inverse-Gamma shape of the noise-variance prior.
    pub alpha_sigma: f64,
    /// Inverse-Gamma scale of the noise-variance prior.
    pub beta_sigma: f64,
    pub mu_mu: f64,
    /// Precision of the Gaussian hyperprior on `mu`.
    pub tau_mu: f64,
    /// Gamma shape of the hyperprior on `tau`.
    pub a: f64,
    /// Gamma rate of the hyperprior on `tau`.
    pub b: f64,
    /// Gamma shape of the hyperprior on `lambda` (GRRN).
    pub alpha_lambda: f64,
    /// Gamma rate of the hyperprior on `lambda` (GRRN).
    pub beta_lambda: BetaLambda,
    /// Exponential rate of the GEE priors.
    pub gee_lambda: f64,
    /// Parent mean of the GTT priors.
    pub gtt_mu: f64,
    /// Parent precision of the GTT priors.
    pub gtt_tau: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha_sigma: 1.0,
            beta_sigma: 1.0,
            mu_mu: 0.0,
            tau_mu: 0.1,
            a: 1.0,
            b: 1.0,
            alpha_lambda: 1.0,
            beta_lambda: BetaLambda::default(),
            gee_lambda: 0.1,
            gtt_mu: 0.0,
            gtt_tau: 0.1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_sigma", self.alpha_sigma),
            ("beta_sigma", self.beta_sigma),
            ("tau_mu", self.tau_mu),
            ("a", self.a),
            ("b", self.b),
            ("alpha_lambda", self.alpha_lambda),
            ("gee_lambda", self.gee_lambda),
            ("gtt_tau", self.gtt_tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("mu_mu", self.mu_mu), ("gtt_mu", self.gtt_mu)] {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite, got {v}")));
            }
        }
        match self.beta_lambda {
            BetaLambda::Uninformative { scale } if !(scale > 0.0 && scale.is_finite()) => {
                Err(Error::config(format!("beta_lambda scale must be > 0, got {scale}")))
            }
            BetaLambda::Fixed(v) if !(v > 0.0 && v.is_finite()) => {
                Err(Error::config(format!("beta_lambda must be > 0, got {v}")))
            }
            _ => Ok(()),
        }
    }

    /// Pins `beta_lambda` to a number using the training data and `K`.
    pub fn resolved(&self, train: &ObservedMatrix, k: usize) -> Result<HyperParams> {
        self.validate()?;
        let beta = self.beta_lambda.resolve(train.observed_mean()?, k)?;
        Ok(HyperParams {
            beta_lambda: BetaLambda::Fixed(beta),
            ..*self
        })
    }

    /// The numeric `beta_lambda`; errors if it still depends on the data.
    pub fn beta_lambda_value(&self) -> Result<f64> {
        match self.beta_lambda {
            BetaLambda::Fixed(v) => Ok(v),
            BetaLambda::Uninformative { .. } => Err(Error::config(
                "beta_lambda has not been resolved against training data",
            )),
        }
    }
}

/// Per-entry hyperprior variables of the hierarchical models.
///
/// `mu_*` may be negative. For GTTN the `lambda_*` matrices are carried but
/// never read; for GEE and GTT the whole state is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorState {
    pub mu_w: Array2<f64>,
    pub tau_w: Array2<f64>,
    pub lambda_w: Array2<f64>,
    pub mu_z: Array2<f64>,
    pub tau_z: Array2<f64>,
    pub lambda_z: Array2<f64>,
}

impl PriorState {
    /// Constant-valued state for `M x K` and `K x N` factors.
    pub fn constant(m: usize, n: usize, k: usize, mu: f64, tau: f64, lambda: f64) -> Self {
        Self {
            mu_w: Array2::from_elem((m, k), mu),
            tau_w: Array2::from_elem((m, k), tau),
            lambda_w: Array2::from_elem((m, k), lambda),
            mu_z: Array2::from_elem((k, n), mu),
            tau_z: Array2::from_elem((k, n), tau),
            lambda_z: Array2::from_elem((k, n), lambda),
        }
    }

    pub(crate) fn check_shape(&self, state: &FactorState) -> Result<()> {
        let wd = state.w.dim();
        let zd = state.z.dim();
        let ok = [&self.mu_w, &self.tau_w, &self.lambda_w]
            .iter()
            .all(|a| a.dim() == wd)
            && [&self.mu_z, &self.tau_z, &self.lambda_z]
                .iter()
                .all(|a| a.dim() == zd);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("prior state does not match factor shapes".into()))
        }
    }
}

/// `WZ`.
pub fn predict(state: &FactorState) -> Result<Array2<f64>> {
    if state.w.ncols() != state.z.nrows() {
        return Err(Error::Shape(format!(
            "W is {:?} but Z is {:?}",
            state.w.dim(),
            state.z.dim()
        )));
    }
    Ok(state.w.dot(&state.z))
}

/// Mean squared error over observed cells: the masked squared Frobenius loss
/// divided by the number of cells it sums over.
///
/// `mask_override` replaces the data's own mask, e.g. to score a held-out set.
pub fn masked_mse(
    data: &ObservedMatrix,
    prediction: &Array2<f64>,
    mask_override: Option<&Array2<bool>>,
) -> Result<f64> {
    if prediction.dim() != data.values.dim() {
        return Err(Error::Shape(format!(
            "prediction is {:?} but data is {:?}",
            prediction.dim(),
            data.values.dim()
        )));
    }
    let mask = mask_override.unwrap_or(&data.mask);
    if mask.dim() != data.values.dim() {
        return Err(Error::Shape("mask override has the wrong shape".into()));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&a, &p), &m) in data.values.iter().zip(prediction.iter()).zip(mask.iter()) {
        if m {
            sum += (a - p) * (a - p);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::domain("masked MSE over an empty mask"));
    }
    Ok(sum / count as f64)
}
