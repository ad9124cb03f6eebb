//! Closed-form conditional posteriors.
//!
//! Every factor entry has a truncated-normal conditional. What differs between
//! the models is the prior it is combined with:
//!
//! | model | prior on `w_mk`                        |
//! |-------|----------------------------------------|
//! | GEE   | `E(lambda)`                            |
//! | GTT   | `TN(mu, 1/tau)` with fixed `mu, tau`   |
//! | GTTN  | `TN(mu_mk, 1/tau_mk)`, hyperprior on both |
//! | GRRN  | `RN(mu_mk, 1/tau_mk, lambda_mk)`, hyperprior on all three |
//!
//! The functions taking an [`ObservedMatrix`] compute their sums directly from
//! the data. The sampler gets the same sums from a residual cache and feeds them
//! through [`tn_conditional`], so both paths share the final formulas.

use crate::distributions::{
    floor_positive, GammaParams, GaussianParams, InvGammaParams, TnParams,
};
use crate::error::{Error, Result};
use crate::model::{predict, FactorState, HyperParams, ObservedMatrix, PriorState};

/// Guard used when a GEE conditional has no likelihood curvature.
pub const GEE_EPSILON: f64 = 1e-12;

/// Sufficient statistics of the likelihood for one factor entry.
///
/// For `w_mk`: `sum_sq = sum_j z_kj^2` and
/// `sum_cross = sum_j z_kj (a_mj - sum_{i != k} w_mi z_ij)`, both over the
/// observed columns of row `m`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LikelihoodStats {
    pub sum_sq: f64,
    pub sum_cross: f64,
}

/// Prior on a single factor entry, as seen by its conditional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorPrior {
    Exponential { rate: f64 },
    TruncatedNormal { mean: f64, precision: f64 },
}

impl FactorPrior {
    /// The rectified-normal prior in its truncated-normal form.
    pub fn rectified(mu: f64, tau: f64, lambda: f64) -> Self {
        let tau = floor_positive(tau);
        FactorPrior::TruncatedNormal {
            mean: (tau * mu - floor_positive(lambda)) / tau,
            precision: tau,
        }
    }
}

/// Outcome of combining likelihood statistics with a prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TnConditional {
    pub params: TnParams,
    /// Set when the GEE variance guard kicked in.
    pub clamped: bool,
}

/// Posterior parent variance `sigma2 / (sum_sq + tau sigma2)` and parent mean
/// `(sum_cross / sigma2 + tau mu) * variance` for a TN prior; for an
/// exponential prior the variance is `sigma2 / sum_sq` and the mean
/// `(-lambda + sum_cross / sigma2) * variance`.
///
/// Returns the offending values as a message when they are not finite.
pub fn tn_conditional(
    stats: LikelihoodStats,
    sigma2: f64,
    prior: FactorPrior,
) -> std::result::Result<TnConditional, String> {
    let sigma2 = floor_positive(sigma2);
    let (variance, mean, clamped) = match prior {
        FactorPrior::TruncatedNormal { mean, precision } => {
            let tau = floor_positive(precision);
            let variance = sigma2 / (stats.sum_sq + tau * sigma2);
            (variance, (stats.sum_cross / sigma2 + tau * mean) * variance, false)
        }
        FactorPrior::Exponential { rate } => {
            let clamped = stats.sum_sq < GEE_EPSILON;
            let variance = sigma2 / stats.sum_sq.max(GEE_EPSILON);
            (variance, (-rate + stats.sum_cross / sigma2) * variance, clamped)
        }
    };
    let params = TnParams::from_variance(mean, variance).map_err(|e| {
        format!("{e} (sum_sq={}, sum_cross={}, sigma2={sigma2}, prior={prior:?})", stats.sum_sq, stats.sum_cross)
    })?;
    Ok(TnConditional { params, clamped })
}

fn check_indices(state: &FactorState, data: &ObservedMatrix, row: usize, k: usize, col: usize) -> Result<()> {
    if state.w.nrows() != data.n_rows() || state.z.ncols() != data.n_cols() {
        return Err(Error::Shape(format!(
            "factors {:?}x{:?} do not match data {}x{}",
            state.w.dim(),
            state.z.dim(),
            data.n_rows(),
            data.n_cols()
        )));
    }
    if row >= data.n_rows() || col >= data.n_cols() || k >= state.k() {
        return Err(Error::Shape(format!("index out of range: row {row}, col {col}, k {k}")));
    }
    Ok(())
}

/// Likelihood statistics for `w_mk`, summing over the observed columns of row `m`.
pub fn likelihood_stats_w(state: &FactorState, data: &ObservedMatrix, m: usize, k: usize) -> Result<LikelihoodStats> {
    check_indices(state, data, m, k, 0)?;
    let mut stats = LikelihoodStats::default();
    for j in 0..data.n_cols() {
        if !data.is_observed(m, j) {
            continue;
        }
        let zkj = state.z[[k, j]];
        let others: f64 = (0..state.k())
            .filter(|&i| i != k)
            .map(|i| state.w[[m, i]] * state.z[[i, j]])
            .sum();
        stats.sum_sq += zkj * zkj;
        stats.sum_cross += zkj * (data.values()[[m, j]] - others);
    }
    Ok(stats)
}

/// Likelihood statistics for `z_kn`, summing over the observed rows of column `n`.
pub fn likelihood_stats_z(state: &FactorState, data: &ObservedMatrix, k: usize, n: usize) -> Result<LikelihoodStats> {
    check_indices(state, data, 0, k, n)?;
    let mut stats = LikelihoodStats::default();
    for i in 0..data.n_rows() {
        if !data.is_observed(i, n) {
            continue;
        }
        let wik = state.w[[i, k]];
        let others: f64 = (0..state.k())
            .filter(|&l| l != k)
            .map(|l| state.w[[i, l]] * state.z[[l, n]])
            .sum();
        stats.sum_sq += wik * wik;
        stats.sum_cross += wik * (data.values()[[i, n]] - others);
    }
    Ok(stats)
}

fn finish(variable: &'static str, row: usize, col: usize, r: std::result::Result<TnConditional, String>) -> Result<TnParams> {
    r.map(|c| c.params).map_err(|detail| Error::Numerical {
        variable,
        row,
        col,
        detail,
    })
}

/// GRRN conditional of `w_mk`.
pub fn grrn_cond_w(state: &FactorState, prior: &PriorState, data: &ObservedMatrix, m: usize, k: usize) -> Result<TnParams> {
    prior.check_shape(state)?;
    let stats = likelihood_stats_w(state, data, m, k)?;
    let p = FactorPrior::rectified(prior.mu_w[[m, k]], prior.tau_w[[m, k]], prior.lambda_w[[m, k]]);
    finish("w", m, k, tn_conditional(stats, state.sigma2, p))
}

/// GRRN conditional of `z_kn`.
pub fn grrn_cond_z(state: &FactorState, prior: &PriorState, data: &ObservedMatrix, k: usize, n: usize) -> Result<TnParams> {
    prior.check_shape(state)?;
    let stats = likelihood_stats_z(state, data, k, n)?;
    let p = FactorPrior::rectified(prior.mu_z[[k, n]], prior.tau_z[[k, n]], prior.lambda_z[[k, n]]);
    finish("z", k, n, tn_conditional(stats, state.sigma2, p))
}

/// GEE conditional of `w_mk` with rate `hyper.gee_lambda`.
///
/// With no likelihood curvature (`sum z^2 = 0`) the variance is guarded at
/// `sigma2 / GEE_EPSILON`; the second element reports whether that happened.
pub fn gee_cond_w(state: &FactorState, data: &ObservedMatrix, m: usize, k: usize, hyper: &HyperParams) -> Result<(TnParams, bool)> {
    let stats = likelihood_stats_w(state, data, m, k)?;
    let r = tn_conditional(stats, state.sigma2, FactorPrior::Exponential { rate: hyper.gee_lambda });
    let clamped = r.as_ref().map(|c| c.clamped).unwrap_or(false);
    Ok((finish("w", m, k, r)?, clamped))
}

pub fn gee_cond_z(state: &FactorState, data: &ObservedMatrix, k: usize, n: usize, hyper: &HyperParams) -> Result<(TnParams, bool)> {
    let stats = likelihood_stats_z(state, data, k, n)?;
    let r = tn_conditional(stats, state.sigma2, FactorPrior::Exponential { rate: hyper.gee_lambda });
    let clamped = r.as_ref().map(|c| c.clamped).unwrap_or(false);
    Ok((finish("z", k, n, r)?, clamped))
}

/// GTT conditional of `w_mk` under a `TN(prior_mean, 1/prior_precision)` prior.
/// GTTN uses the same function with the entry's current hyperprior draws.
pub fn gtt_cond_w(
    state: &FactorState,
    data: &ObservedMatrix,
    m: usize,
    k: usize,
    prior_mean: f64,
    prior_precision: f64,
) -> Result<TnParams> {
    let stats = likelihood_stats_w(state, data, m, k)?;
    let p = FactorPrior::TruncatedNormal {
        mean: prior_mean,
        precision: prior_precision,
    };
    finish("w", m, k, tn_conditional(stats, state.sigma2, p))
}

pub fn gtt_cond_z(
    state: &FactorState,
    data: &ObservedMatrix,
    k: usize,
    n: usize,
    prior_mean: f64,
    prior_precision: f64,
) -> Result<TnParams> {
    let stats = likelihood_stats_z(state, data, k, n)?;
    let p = FactorPrior::TruncatedNormal {
        mean: prior_mean,
        precision: prior_precision,
    };
    finish("z", k, n, tn_conditional(stats, state.sigma2, p))
}

/// Conditional of the prior mean `mu` of one entry: a Gaussian (not
/// truncated, `mu` may go negative) with precision `tau + tau_mu` and mean
/// `(tau w + tau_mu mu_mu) / (tau + tau_mu)`.
pub fn grrn_cond_mu(w: f64, tau_w: f64, hyper: &HyperParams) -> GaussianParams {
    let tau_w = floor_positive(tau_w);
    let precision = tau_w + hyper.tau_mu;
    GaussianParams {
        mean: (tau_w * w + hyper.tau_mu * hyper.mu_mu) / precision,
        precision,
    }
}

/// Conditional of the prior precision `tau`: `G(a + 1/2, b + (w - mu)^2 / 2)`.
pub fn grrn_cond_tau(w: f64, mu_w: f64, hyper: &HyperParams) -> GammaParams {
    GammaParams {
        shape: hyper.a + 0.5,
        rate: hyper.b + 0.5 * (w - mu_w) * (w - mu_w),
    }
}

/// Conditional of the rectifier rate `lambda`: `G(alpha_lambda + 1, beta_lambda + w)`.
pub fn grrn_cond_lambda(w: f64, hyper: &HyperParams) -> Result<GammaParams> {
    Ok(GammaParams {
        shape: hyper.alpha_lambda + 1.0,
        rate: hyper.beta_lambda_value()? + w,
    })
}

/// GTTN's `mu` conditional; identical in form to GRRN's.
pub fn gttn_cond_mu(w: f64, tau_w: f64, hyper: &HyperParams) -> GaussianParams {
    grrn_cond_mu(w, tau_w, hyper)
}

/// GTTN's `tau` conditional; identical in form to GRRN's.
pub fn gttn_cond_tau(w: f64, mu_w: f64, hyper: &HyperParams) -> GammaParams {
    grrn_cond_tau(w, mu_w, hyper)
}

/// Inverse-Gamma conditional of the noise variance.
///
/// The likelihood only covers observed cells, so the shape grows by `|Omega| / 2`
/// (not `MN / 2`) and the scale by half the observed residual sum of squares.
pub fn cond_sigma2(state: &FactorState, data: &ObservedMatrix, hyper: &HyperParams) -> Result<InvGammaParams> {
    let pred = predict(state)?;
    if pred.dim() != data.values().dim() {
        return Err(Error::Shape("factor product does not match data".into()));
    }
    let sse: f64 = data.observed().map(|(i, j, a)| (a - pred[[i, j]]).powi(2)).sum();
    Ok(sigma2_from_sse(sse, data.observed_count(), hyper))
}

pub(crate) fn sigma2_from_sse(sse: f64, observed: usize, hyper: &HyperParams) -> InvGammaParams {
    InvGammaParams {
        shape: observed as f64 / 2.0 + hyper.alpha_sigma,
        scale: 0.5 * sse + hyper.beta_sigma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BetaLambda;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    fn one_by_one(a: f64, w: f64, z: f64, sigma2: f64) -> (FactorState, ObservedMatrix) {
        (
            FactorState::new(array![[w]], array![[z]], sigma2).unwrap(),
            ObservedMatrix::fully_observed(array![[a]]),
        )
    }

    #[test]
    fn grrn_w_hand_case() {
        let (s, d) = one_by_one(2.0, 0.3, 1.0, 1.0);
        let prior = PriorState::constant(1, 1, 1, 1.0, 1.0, 1.0);
        let p = grrn_cond_w(&s, &prior, &d, 0, 0).unwrap();
        assert_abs_diff_eq!(p.parent_variance(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.parent_mean, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_likelihood_information_gives_prior() {
        let s = FactorState::new(array![[0.7, 0.2]], Array2::zeros((2, 3)), 0.8).unwrap();
        let d = ObservedMatrix::fully_observed(array![[1.0, 2.0, 3.0]]);
        let prior = PriorState::constant(1, 3, 2, 0.4, 2.5, 0.3);
        let p = grrn_cond_w(&s, &prior, &d, 0, 1).unwrap();
        assert_abs_diff_eq!(p.parent_precision, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.parent_mean, (2.5 * 0.4 - 0.3) / 2.5, epsilon = 1e-12);
    }

    #[test]
    fn unobserved_row_falls_back_to_prior() {
        let values = array![[1.0, 2.0], [3.0, 4.0]];
        let mask = array![[false, false], [true, true]];
        let d = ObservedMatrix::new(values, mask).unwrap();
        let s = FactorState::new(array![[1.0], [1.0]], array![[1.0, 2.0]], 1.0).unwrap();
        let prior = PriorState::constant(2, 2, 1, 1.0, 3.0, 0.6);
        let p = grrn_cond_w(&s, &prior, &d, 0, 0).unwrap();
        assert_eq!(p.parent_precision, 3.0);
        assert_abs_diff_eq!(p.parent_mean, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn mu_examples() {
        let h = HyperParams {
            tau_mu: 1.0,
            mu_mu: 0.0,
            ..HyperParams::default()
        };
        let g = grrn_cond_mu(2.0, 1.0, &h);
        assert_eq!((g.precision, g.mean), (2.0, 1.0));
        for tau in [0.1, 5.0] {
            assert_eq!(grrn_cond_mu(0.0, tau, &h).mean, 0.0);
        }
        let strong = HyperParams {
            tau_mu: 1e12,
            mu_mu: -3.0,
            ..HyperParams::default()
        };
        assert_abs_diff_eq!(grrn_cond_mu(5.0, 1.0, &strong).mean, -3.0, epsilon = 1e-10);

        let h = HyperParams {
            tau_mu: 0.1,
            mu_mu: 0.0,
            ..HyperParams::default()
        };
        let g = gttn_cond_mu(1.0, 2.0, &h);
        assert_abs_diff_eq!(g.precision, 2.1, epsilon = 1e-15);
        assert_abs_diff_eq!(g.mean, 0.952_38, epsilon = 1e-5);
    }

    #[test]
    fn tau_examples() {
        let h = HyperParams::default();
        assert_eq!(grrn_cond_tau(0.8, 0.8, &h).rate, h.b);
        assert_eq!(grrn_cond_tau(3.0, 1.0, &h), GammaParams { shape: 1.5, rate: 3.0 });
        assert_eq!(grrn_cond_tau(1.5, 1.0, &h), GammaParams { shape: 1.5, rate: 1.125 });
        assert_eq!(gttn_cond_tau(2.0, 1.0, &h), GammaParams { shape: 1.5, rate: 1.5 });
    }

    #[test]
    fn gttn_formulas_match_grrn() {
        let h = HyperParams::default();
        for (w, t, mu) in [(2.0, 1.0, 0.0), (0.0, 0.3, -1.0), (0.7, 4.0, 2.0)] {
            assert_eq!(gttn_cond_mu(w, t, &h), grrn_cond_mu(w, t, &h));
            assert_eq!(gttn_cond_tau(w, mu, &h), grrn_cond_tau(w, mu, &h));
        }
    }

    #[test]
    fn lambda_examples() {
        let h = |alpha, beta| HyperParams {
            alpha_lambda: alpha,
            beta_lambda: BetaLambda::Fixed(beta),
            ..HyperParams::default()
        };
        assert_eq!(grrn_cond_lambda(0.0, &h(1.0, 0.59)).unwrap(), GammaParams { shape: 2.0, rate: 0.59 });
        assert_eq!(grrn_cond_lambda(3.0, &h(1.0, 1.0)).unwrap(), GammaParams { shape: 2.0, rate: 4.0 });
        assert_eq!(grrn_cond_lambda(0.25, &h(2.0, 0.5)).unwrap(), GammaParams { shape: 3.0, rate: 0.75 });
        assert!(grrn_cond_lambda(1.0, &HyperParams::default()).is_err());
    }

    #[test]
    fn sigma2_examples() {
        let h = HyperParams::default();
        let s = FactorState::new(array![[1.0], [3.0]], array![[1.0, 2.0]], 1.0).unwrap();
        let exact = ObservedMatrix::fully_observed(predict(&s).unwrap());
        assert_eq!(cond_sigma2(&s, &exact, &h).unwrap(), InvGammaParams { shape: 3.0, scale: 1.0 });

        let off = ObservedMatrix::fully_observed(predict(&s).unwrap() + 1.0);
        assert_eq!(cond_sigma2(&s, &off, &h).unwrap(), InvGammaParams { shape: 3.0, scale: 3.0 });

        let values = array![[2.0, 2.0], [3.0, 4.0]];
        let half = ObservedMatrix::new(values, array![[true, false], [false, true]]).unwrap();
        // prediction [[0, 0], [2, 4]]: observed residuals {2, 0}
        let s = FactorState::new(array![[0.0], [2.0]], array![[1.0, 2.0]], 1.0).unwrap();
        assert_eq!(cond_sigma2(&s, &half, &h).unwrap(), InvGammaParams { shape: 2.0, scale: 3.0 });
    }

    #[test]
    fn gee_examples() {
        let (s, d) = one_by_one(2.0, 0.5, 1.0, 1.0);
        let h = HyperParams::default();
        let (p, clamped) = gee_cond_w(&s, &d, 0, 0, &h).unwrap();
        assert!(!clamped);
        assert_abs_diff_eq!(p.parent_variance(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.parent_mean, 1.9, epsilon = 1e-15);

        let stats = LikelihoodStats { sum_sq: 4.0, sum_cross: 3.0 };
        let c = tn_conditional(stats, 0.5, FactorPrior::Exponential { rate: 0.0 }).unwrap();
        assert_abs_diff_eq!(c.params.parent_mean, 0.75, epsilon = 1e-15);

        let (s, d) = one_by_one(2.0, 0.5, 0.0, 1.0);
        let (p, clamped) = gee_cond_w(&s, &d, 0, 0, &h).unwrap();
        assert!(clamped);
        assert_abs_diff_eq!(p.parent_variance(), 1.0 / GEE_EPSILON, epsilon = 1.0);
    }

    #[test]
    fn gtt_examples() {
        let (s, d) = one_by_one(2.0, 0.5, 1.0, 1.0);
        let p = gtt_cond_w(&s, &d, 0, 0, 0.0, 0.1).unwrap();
        assert_abs_diff_eq!(p.parent_variance(), 1.0 / 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(p.parent_mean, 2.0 / 1.1, epsilon = 1e-12);

        let values = array![[1.0, 0.5, 2.0], [0.3, 1.1, 0.0]];
        let d = ObservedMatrix::new(values, array![[true, true, false], [true, false, true]]).unwrap();
        let s = FactorState::new(array![[0.4, 1.2], [0.9, 0.1]], array![[0.3, 0.8, 1.5], [0.6, 0.2, 0.7]], 0.35).unwrap();
        let prior = PriorState::constant(2, 3, 2, -0.2, 1.7, 0.45);
        for m in 0..2 {
            for k in 0..2 {
                let g = grrn_cond_w(&s, &prior, &d, m, k).unwrap();
                let t = gtt_cond_w(&s, &d, m, k, (1.7 * -0.2 - 0.45) / 1.7, 1.7).unwrap();
                assert_eq!(g, t);
            }
        }

        // vanishing prior precision approaches GEE with lambda = 0
        let t = gtt_cond_w(&s, &d, 1, 0, 0.0, 1e-12).unwrap();
        let h0 = HyperParams { gee_lambda: 1e-300, ..HyperParams::default() };
        let (e, _) = gee_cond_w(&s, &d, 1, 0, &h0).unwrap();
        assert_abs_diff_eq!(t.parent_mean, e.parent_mean, epsilon = 1e-9);
        assert_abs_diff_eq!(t.parent_precision, e.parent_precision, epsilon = 1e-9);
    }

    #[test]
    fn non_finite_parameters_are_reported() {
        let stats = LikelihoodStats { sum_sq: 1.0, sum_cross: f64::NAN };
        let r = tn_conditional(stats, 1.0, FactorPrior::TruncatedNormal { mean: 0.0, precision: 1.0 });
        assert!(r.is_err());
        let (mut s, d) = one_by_one(2.0, 0.5, 1.0, 1.0);
        s.z[[0, 0]] = f64::INFINITY;
        let err = gtt_cond_w(&s, &d, 0, 0, 0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Numerical { variable: "w", row: 0, col: 0, .. }), "{err}");
    }
}
