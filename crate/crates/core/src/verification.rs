//! Test oracles that share no code with the quantities they check.
//!
//! [`oracle_normal_cdf`] is built from its own erf series and continued
//! fraction, [`integrate`] is an adaptive Gauss-Kronrod rule, and the model
//! log densities below are written out from the generative definitions with
//! the rectified-normal normalizer computed by quadrature. A conditional is
//! checked by normalizing `exp(log joint)` in one variable numerically and
//! comparing its moments with those implied by the sampler's closed form.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::distributions::{
    rn_log_normalizer, sample_exponential, sample_gamma, sample_inverse_gamma, sample_rn, sample_tn, GammaParams,
    GaussianParams, InvGammaParams, RnParams, TnParams,
};
use crate::error::{Error, Result};
use crate::model::{BetaLambda, FactorState, HyperParams, ObservedMatrix, PriorState};
use crate::samplers::{
    cond_sigma2, gee_cond_w, gee_cond_z, grrn_cond_lambda, grrn_cond_mu, grrn_cond_tau, grrn_cond_w,
    grrn_cond_z, gtt_cond_w, gtt_cond_z, gttn_cond_mu, gttn_cond_tau, ModelKind,
};

// ---------------------------------------------------------------------------
// erf / Phi

/// erf by its Maclaurin series. Accurate to ~1e-13 for `|x| <= 3`.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-17 * sum.abs() {
        n += 1.0;
        term *= -x2 / n;
        sum += term / (2.0 * n + 1.0);
    }
    2.0 / PI.sqrt() * sum
}

/// erfc for `x >= 2` by the Laplace continued fraction.
fn erfc_continued_fraction(x: f64) -> f64 {
    let mut t = x;
    for n in (1..=120).rev() {
        t = x + (n as f64 / 2.0) / t;
    }
    (-x * x).exp() / (PI.sqrt() * t)
}

pub fn oracle_erfc(x: f64) -> f64 {
    if x >= 2.0 {
        erfc_continued_fraction(x)
    } else if x <= -2.0 {
        2.0 - erfc_continued_fraction(-x)
    } else {
        1.0 - erf_series(x)
    }
}

/// Standard normal CDF from [`oracle_erfc`].
pub fn oracle_normal_cdf(x: f64) -> f64 {
    0.5 * oracle_erfc(-x / 2f64.sqrt())
}

/// `ln Phi(x)`, using the continued fraction in log form for the lower tail.
pub fn oracle_normal_log_cdf(x: f64) -> f64 {
    if x < -3.0 {
        let y = -x / 2f64.sqrt();
        let mut t = y;
        for n in (1..=120).rev() {
            t = y + (n as f64 / 2.0) / t;
        }
        0.5f64.ln() - y * y - (PI.sqrt() * t).ln()
    } else {
        oracle_normal_cdf(x).ln()
    }
}

fn oracle_normal_log_pdf(x: f64, mean: f64, precision: f64) -> f64 {
    0.5 * (precision / (2.0 * PI)).ln() - 0.5 * precision * (x - mean) * (x - mean)
}

// ---------------------------------------------------------------------------
// Quadrature

/// A definite integral over a finite interval.
pub struct QuadratureSpec<'a> {
    pub integrand: &'a dyn Fn(f64) -> f64,
    pub lo: f64,
    /// Finite; truncate infinite ranges where the integrand is negligible.
    pub hi: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureResult {
    pub value: f64,
    pub error: f64,
    /// False when the subdivision budget ran out before `error <= abs_tol`.
    pub converged: bool,
    pub subdivisions: usize,
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GAUSS7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Kronrod-15 estimate and its distance from the embedded Gauss-7 estimate.
fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = GK_WEIGHTS[7] * fc;
    let mut gauss = GAUSS7_WEIGHTS[3] * fc;
    for i in 0..7 {
        let dx = h * GK_NODES[i];
        let pair = f(c - dx) + f(c + dx);
        kronrod += GK_WEIGHTS[i] * pair;
        if i % 2 == 1 {
            gauss += GAUSS7_WEIGHTS[i / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Adaptive Gauss-Kronrod 7/15 quadrature, bisecting the piece with the
/// largest error estimate until the total is below `abs_tol`.
pub fn integrate(spec: &QuadratureSpec<'_>) -> Result<QuadratureResult> {
    if !(spec.lo.is_finite() && spec.hi.is_finite() && spec.lo < spec.hi) {
        return Err(Error::domain(format!("bad interval [{}, {}]", spec.lo, spec.hi)));
    }
    if !(spec.abs_tol > 0.0) {
        return Err(Error::domain(format!("tolerance must be > 0, got {}", spec.abs_tol)));
    }
    let f = spec.integrand;
    let (value, error) = gk15(f, spec.lo, spec.hi);
    let mut heap = BinaryHeap::new();
    heap.push(Piece {
        a: spec.lo,
        b: spec.hi,
        value,
        error,
    });
    let mut total_err = error;
    let mut subdivisions = 0;
    while total_err > spec.abs_tol && subdivisions < spec.max_subdivisions {
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        let (lv, le) = gk15(f, worst.a, mid);
        let (rv, re) = gk15(f, mid, worst.b);
        total_err += le + re - worst.error;
        heap.push(Piece { a: worst.a, b: mid, value: lv, error: le });
        heap.push(Piece { a: mid, b: worst.b, value: rv, error: re });
        subdivisions += 1;
    }
    // Re-sum to shed the running-update round-off.
    let value: f64 = heap.iter().map(|p| p.value).sum();
    let error: f64 = heap.iter().map(|p| p.error).sum();
    if !value.is_finite() {
        return Err(Error::domain("integrand is not finite on the interval"));
    }
    Ok(QuadratureResult {
        value,
        error,
        converged: error <= spec.abs_tol,
        subdivisions,
    })
}

fn integrate_strict(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, abs_tol: f64) -> Result<f64> {
    let r = integrate(&QuadratureSpec {
        integrand: f,
        lo,
        hi,
        abs_tol,
        max_subdivisions: 4000,
    })?;
    if r.converged {
        Ok(r.value)
    } else {
        Err(Error::domain(format!(
            "quadrature on [{lo}, {hi}] did not converge: error {} > {abs_tol}",
            r.error
        )))
    }
}

// ---------------------------------------------------------------------------
// Truncated-normal moments

/// Mean and variance of `TN(mu, 1/tau)` from the hazard `h = phi(alpha) / (1 - Phi(alpha))`,
/// `alpha = -mu / sigma`:
/// mean `mu + sigma h`, variance `sigma^2 (1 + alpha h - h^2)`.
pub fn tn_moments(p: &TnParams) -> (f64, f64) {
    let sigma = 1.0 / p.parent_precision.sqrt();
    let alpha = -p.parent_mean / sigma;
    // excess = h - alpha, kept separate so the large-alpha tail does not cancel
    let excess = if alpha > 4.0 {
        // h - alpha = 1 / (alpha + 2 / (alpha + 3 / (alpha + ...)))
        let mut t = alpha;
        for n in (2..150).rev() {
            t = alpha + n as f64 / t;
        }
        1.0 / t
    } else {
        let pdf = (-0.5 * alpha * alpha).exp() / (2.0 * PI).sqrt();
        pdf / oracle_normal_cdf(-alpha) - alpha
    };
    let h = excess + alpha;
    (sigma * excess, sigma * sigma * (1.0 - h * excess))
}

// ---------------------------------------------------------------------------
// Log joint densities

/// `ln C(mu, tau, lambda)` with `C = int_0^inf N(x | mu, 1/tau) lambda e^{-lambda x} dx`,
/// by quadrature of the integrand scaled to 1 at its maximum.
pub fn rn_log_normalizer_by_quadrature(mu: f64, tau: f64, lambda: f64) -> Result<f64> {
    // The log integrand is a concave quadratic; its maximum on [0, inf).
    let mode = (mu - lambda / tau).max(0.0);
    let d = mode - mu;
    let top = oracle_normal_log_pdf(mode, mu, tau) + lambda.ln() - lambda * mode;
    // Integrand over the offset u = x - mode, scaled to 1 at u = 0.
    let f = |u: f64| (-0.5 * tau * u * (u + 2.0 * d) - lambda * u).exp();
    let sigma = 1.0 / tau.sqrt();
    // At a boundary mode the integrand falls off at least at rate `slope`.
    let slope = tau * d + lambda;
    let reach = if mode == 0.0 && slope > 0.0 { (12.0 * sigma).min(60.0 / slope) } else { 12.0 * sigma };
    let mut total = integrate_strict(&f, 0.0, reach, 1e-13 * reach)?;
    if mode > 0.0 {
        let back = mode.min(12.0 * sigma);
        total += integrate_strict(&f, -back, 0.0, 1e-13 * back)?;
    }
    Ok(top + total.ln())
}

pub fn rn_normalizer_by_quadrature(mu: f64, tau: f64, lambda: f64) -> Result<f64> {
    rn_log_normalizer_by_quadrature(mu, tau, lambda).map(f64::exp)
}

/// Which TN hyperprior density the GTTN oracle uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GttnHyperprior {
    /// `(1 - Phi(-mu sqrt(tau))) N(mu) G(tau)`: the form that yields a Gamma
    /// `tau` conditional with shape `a + 1/2`.
    #[default]
    Consistent,
    /// The same with an extra `1 / sqrt(tau)` factor, which shifts the
    /// `tau` conditional's shape to `a`.
    WithInverseSqrtTau,
}

/// One sampled variable of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VariableId {
    W(usize, usize),
    Z(usize, usize),
    MuW(usize, usize),
    TauW(usize, usize),
    LambdaW(usize, usize),
    MuZ(usize, usize),
    TauZ(usize, usize),
    LambdaZ(usize, usize),
    Sigma2,
}

impl VariableId {
    /// Every variable `kind` samples on an `m x n` instance with `k` factors.
    pub fn all(kind: ModelKind, m: usize, n: usize, k: usize) -> Vec<VariableId> {
        let mut out = Vec::new();
        for r in 0..m {
            for c in 0..k {
                out.push(VariableId::W(r, c));
                if kind.is_hierarchical() {
                    out.push(VariableId::MuW(r, c));
                    out.push(VariableId::TauW(r, c));
                }
                if kind == ModelKind::Grrn {
                    out.push(VariableId::LambdaW(r, c));
                }
            }
        }
        for r in 0..k {
            for c in 0..n {
                out.push(VariableId::Z(r, c));
                if kind.is_hierarchical() {
                    out.push(VariableId::MuZ(r, c));
                    out.push(VariableId::TauZ(r, c));
                }
                if kind == ModelKind::Grrn {
                    out.push(VariableId::LambdaZ(r, c));
                }
            }
        }
        out.push(VariableId::Sigma2);
        out
    }

    fn support(&self) -> Support {
        match self {
            VariableId::W(..) | VariableId::Z(..) => Support::NonNegative,
            VariableId::MuW(..) | VariableId::MuZ(..) => Support::Real,
            _ => Support::Positive,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Support {
    NonNegative,
    Real,
    Positive,
}

/// A small model state to check conditionals on.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub data: ObservedMatrix,
    pub state: FactorState,
    pub prior: PriorState,
    /// `beta_lambda` must be [`BetaLambda::Fixed`].
    pub hyper: HyperParams,
}

impl TinyInstance {
    /// `a = 2`, `w = 0.3`, `z = 1`, `sigma2 = 1`, every `(mu, tau, lambda) = (1, 1, 1)`
    /// and default hyperparameters with `beta_lambda = sqrt(2)`.
    pub fn hand_1x1() -> Self {
        let data = ObservedMatrix::fully_observed(Array2::from_elem((1, 1), 2.0));
        let state = FactorState::new(Array2::from_elem((1, 1), 0.3), Array2::from_elem((1, 1), 1.0), 1.0)
            .expect("valid state");
        let hyper = HyperParams {
            beta_lambda: BetaLambda::Fixed(2f64.sqrt()),
            ..HyperParams::default()
        };
        Self {
            data,
            state,
            prior: PriorState::constant(1, 1, 1, 1.0, 1.0, 1.0),
            hyper,
        }
    }

    /// Random instance with roughly 70% of cells observed (at least one).
    pub fn random(m: usize, n: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = Array2::from_shape_simple_fn((m, n), || rng.random::<f64>() < 0.7);
        mask[[0, 0]] = true;
        let values = Array2::from_shape_simple_fn((m, n), || rng.random_range(0.5..3.0));
        let data = ObservedMatrix::new(values, mask).expect("same shape");
        let w = Array2::from_shape_simple_fn((m, k), || rng.random_range(0.0..1.5));
        let z = Array2::from_shape_simple_fn((k, n), || rng.random_range(0.0..1.5));
        let state = FactorState::new(w, z, rng.random_range(0.3..1.5)).expect("valid state");
        let mut prior = PriorState::constant(m, n, k, 0.0, 1.0, 1.0);
        for a in [&mut prior.mu_w, &mut prior.mu_z] {
            a.mapv_inplace(|_| rng.random_range(-1.0..1.5));
        }
        for a in [&mut prior.tau_w, &mut prior.tau_z, &mut prior.lambda_w, &mut prior.lambda_z] {
            a.mapv_inplace(|_| rng.random_range(0.3..2.5));
        }
        let hyper = HyperParams {
            beta_lambda: BetaLambda::Fixed(rng.random_range(0.3..1.5)),
            ..HyperParams::default()
        };
        Self { data, state, prior, hyper }
    }

    fn get(&self, var: VariableId) -> f64 {
        match var {
            VariableId::W(r, c) => self.state.w[[r, c]],
            VariableId::Z(r, c) => self.state.z[[r, c]],
            VariableId::MuW(r, c) => self.prior.mu_w[[r, c]],
            VariableId::TauW(r, c) => self.prior.tau_w[[r, c]],
            VariableId::LambdaW(r, c) => self.prior.lambda_w[[r, c]],
            VariableId::MuZ(r, c) => self.prior.mu_z[[r, c]],
            VariableId::TauZ(r, c) => self.prior.tau_z[[r, c]],
            VariableId::LambdaZ(r, c) => self.prior.lambda_z[[r, c]],
            VariableId::Sigma2 => self.state.sigma2,
        }
    }

    fn set(&mut self, var: VariableId, x: f64) {
        let slot = match var {
            VariableId::W(r, c) => &mut self.state.w[[r, c]],
            VariableId::Z(r, c) => &mut self.state.z[[r, c]],
            VariableId::MuW(r, c) => &mut self.prior.mu_w[[r, c]],
            VariableId::TauW(r, c) => &mut self.prior.tau_w[[r, c]],
            VariableId::LambdaW(r, c) => &mut self.prior.lambda_w[[r, c]],
            VariableId::MuZ(r, c) => &mut self.prior.mu_z[[r, c]],
            VariableId::TauZ(r, c) => &mut self.prior.tau_z[[r, c]],
            VariableId::LambdaZ(r, c) => &mut self.prior.lambda_z[[r, c]],
            VariableId::Sigma2 => &mut self.state.sigma2,
        };
        *slot = x;
    }

    /// `(factor value, mu, tau, lambda)` of the entry a variable belongs to.
    fn entry(&self, var: VariableId) -> Option<(f64, f64, f64, f64)> {
        let p = &self.prior;
        match var {
            VariableId::W(r, c) | VariableId::MuW(r, c) | VariableId::TauW(r, c) | VariableId::LambdaW(r, c) => Some((
                self.state.w[[r, c]],
                p.mu_w[[r, c]],
                p.tau_w[[r, c]],
                p.lambda_w[[r, c]],
            )),
            VariableId::Z(r, c) | VariableId::MuZ(r, c) | VariableId::TauZ(r, c) | VariableId::LambdaZ(r, c) => Some((
                self.state.z[[r, c]],
                p.mu_z[[r, c]],
                p.tau_z[[r, c]],
                p.lambda_z[[r, c]],
            )),
            VariableId::Sigma2 => None,
        }
    }
}

fn log_gamma_kernel(x: f64, shape: f64, rate: f64) -> f64 {
    (shape - 1.0) * x.ln() - rate * x
}

/// Gaussian log likelihood of the observed cells, up to a constant.
fn log_likelihood(inst: &TinyInstance) -> f64 {
    let (w, z, s2) = (&inst.state.w, &inst.state.z, inst.state.sigma2);
    let mut sse = 0.0;
    for (i, j, a) in inst.data.observed() {
        let pred: f64 = (0..w.ncols()).map(|l| w[[i, l]] * z[[l, j]]).sum();
        sse += (a - pred) * (a - pred);
    }
    -0.5 * inst.data.observed_count() as f64 * s2.ln() - sse / (2.0 * s2)
}

/// Log prior of one factor entry plus the log hyperprior of its parameters,
/// up to terms that do not depend on any of them.
fn log_entry_prior(kind: ModelKind, inst: &TinyInstance, x: f64, mu: f64, tau: f64, lambda: f64, gttn: GttnHyperprior) -> Result<f64> {
    let h = &inst.hyper;
    if x < 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(match kind {
        ModelKind::Gee => h.gee_lambda.ln() - h.gee_lambda * x,
        ModelKind::Gtt => {
            oracle_normal_log_pdf(x, h.gtt_mu, h.gtt_tau) - oracle_normal_log_cdf(h.gtt_mu * h.gtt_tau.sqrt())
        }
        ModelKind::Gttn => {
            // 1 - Phi(-y) = Phi(y)
            let log_mass = oracle_normal_log_cdf(mu * tau.sqrt());
            let prior = oracle_normal_log_pdf(x, mu, tau) - log_mass;
            let mut hyperprior =
                log_mass + oracle_normal_log_pdf(mu, h.mu_mu, h.tau_mu) + log_gamma_kernel(tau, h.a, h.b);
            if gttn == GttnHyperprior::WithInverseSqrtTau {
                hyperprior -= 0.5 * tau.ln();
            }
            prior + hyperprior
        }
        ModelKind::Grrn => {
            let log_c = rn_log_normalizer_by_quadrature(mu, tau, lambda)?;
            let prior = oracle_normal_log_pdf(x, mu, tau) + lambda.ln() - lambda * x - log_c;
            let beta = h.beta_lambda_value()?;
            let hyperprior = log_c
                + oracle_normal_log_pdf(mu, h.mu_mu, h.tau_mu)
                + log_gamma_kernel(tau, h.a, h.b)
                + log_gamma_kernel(lambda, h.alpha_lambda, beta);
            prior + hyperprior
        }
        ModelKind::Npnmf => return Err(Error::config("NP-NMF has no probabilistic model")),
    })
}

/// Unnormalized log conditional of `var` at `x`: the log joint with every
/// factor that does not involve `var` dropped.
pub fn log_conditional(kind: ModelKind, inst: &TinyInstance, var: VariableId, x: f64, gttn: GttnHyperprior) -> Result<f64> {
    let mut at = inst.clone();
    at.set(var, x);
    match var {
        VariableId::Sigma2 => {
            if x <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            Ok(log_likelihood(&at) - (at.hyper.alpha_sigma + 1.0) * x.ln() - at.hyper.beta_sigma / x)
        }
        _ => {
            let (w, mu, tau, lambda) = at.entry(var).expect("factor-side variable");
            let prior = log_entry_prior(kind, &at, w, mu, tau, lambda, gttn)?;
            let lik = match var {
                VariableId::W(..) | VariableId::Z(..) => log_likelihood(&at),
                _ => 0.0,
            };
            Ok(lik + prior)
        }
    }
}

// ---------------------------------------------------------------------------
// Conditional check

/// The closed form a sampler uses for one variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImplementedConditional {
    TruncatedNormal { mean: f64, precision: f64 },
    Gaussian { mean: f64, precision: f64 },
    Gamma { shape: f64, rate: f64 },
    InverseGamma { shape: f64, scale: f64 },
}

impl ImplementedConditional {
    /// Multiplies the spread parameter (precision or shape) by `factor`.
    fn perturbed(self, factor: f64) -> Self {
        match self {
            Self::TruncatedNormal { mean, precision } => Self::TruncatedNormal { mean, precision: precision * factor },
            Self::Gaussian { mean, precision } => Self::Gaussian { mean, precision: precision * factor },
            Self::Gamma { shape, rate } => Self::Gamma { shape: shape * factor, rate },
            Self::InverseGamma { shape, scale } => Self::InverseGamma { shape: shape * factor, scale },
        }
    }

    /// Named moments, with an inverse-Gamma described through its precision.
    fn moments(&self) -> Vec<(&'static str, f64)> {
        match *self {
            Self::TruncatedNormal { mean, precision } => {
                let (m, v) = tn_moments(&TnParams { parent_mean: mean, parent_precision: precision });
                vec![("mean", m), ("variance", v)]
            }
            Self::Gaussian { mean, precision } => vec![("mean", mean), ("variance", 1.0 / precision)],
            Self::Gamma { shape, rate } => vec![("mean", shape / rate), ("variance", shape / (rate * rate))],
            Self::InverseGamma { shape, scale } => vec![
                ("mean", scale / (shape - 1.0)),
                ("precision mean", shape / scale),
                ("precision variance", shape / (scale * scale)),
            ],
        }
    }
}

/// The sampler's conditional of `var` on `inst`.
pub fn implemented_conditional(kind: ModelKind, inst: &TinyInstance, var: VariableId) -> Result<ImplementedConditional> {
    let (s, p, d, h) = (&inst.state, &inst.prior, &inst.data, &inst.hyper);
    let tn = |t: TnParams| ImplementedConditional::TruncatedNormal {
        mean: t.parent_mean,
        precision: t.parent_precision,
    };
    let hierarchical_only = || Error::config(format!("{kind} does not sample {var:?}"));
    Ok(match var {
        VariableId::W(m, k) => tn(match kind {
            ModelKind::Grrn => grrn_cond_w(s, p, d, m, k)?,
            ModelKind::Gee => gee_cond_w(s, d, m, k, h)?.0,
            ModelKind::Gtt => gtt_cond_w(s, d, m, k, h.gtt_mu, h.gtt_tau)?,
            ModelKind::Gttn => gtt_cond_w(s, d, m, k, p.mu_w[[m, k]], p.tau_w[[m, k]])?,
            ModelKind::Npnmf => return Err(hierarchical_only()),
        }),
        VariableId::Z(k, n) => tn(match kind {
            ModelKind::Grrn => grrn_cond_z(s, p, d, k, n)?,
            ModelKind::Gee => gee_cond_z(s, d, k, n, h)?.0,
            ModelKind::Gtt => gtt_cond_z(s, d, k, n, h.gtt_mu, h.gtt_tau)?,
            ModelKind::Gttn => gtt_cond_z(s, d, k, n, p.mu_z[[k, n]], p.tau_z[[k, n]])?,
            ModelKind::Npnmf => return Err(hierarchical_only()),
        }),
        VariableId::MuW(..) | VariableId::MuZ(..) if kind.is_hierarchical() => {
            let (x, _, tau, _) = inst.entry(var).expect("factor side");
            let g = if kind == ModelKind::Grrn { grrn_cond_mu(x, tau, h) } else { gttn_cond_mu(x, tau, h) };
            ImplementedConditional::Gaussian { mean: g.mean, precision: g.precision }
        }
        VariableId::TauW(..) | VariableId::TauZ(..) if kind.is_hierarchical() => {
            let (x, mu, _, _) = inst.entry(var).expect("factor side");
            let g = if kind == ModelKind::Grrn { grrn_cond_tau(x, mu, h) } else { gttn_cond_tau(x, mu, h) };
            ImplementedConditional::Gamma { shape: g.shape, rate: g.rate }
        }
        VariableId::LambdaW(..) | VariableId::LambdaZ(..) if kind == ModelKind::Grrn => {
            let (x, _, _, _) = inst.entry(var).expect("factor side");
            let g = grrn_cond_lambda(x, h)?;
            ImplementedConditional::Gamma { shape: g.shape, rate: g.rate }
        }
        VariableId::Sigma2 if kind.is_bayesian() => {
            let g = cond_sigma2(s, d, h)?;
            ImplementedConditional::InverseGamma { shape: g.shape, scale: g.scale }
        }
        _ => return Err(hierarchical_only()),
    })
}

/// Options for [`brute_conditional_check_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    /// Relative tolerance on each moment.
    pub tolerance: f64,
    /// Factor applied to the implemented conditional's spread parameter before
    /// comparing; 1 checks the real thing.
    pub perturbation: f64,
    pub gttn_hyperprior: GttnHyperprior,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-3,
            perturbation: 1.0,
            gttn_hyperprior: GttnHyperprior::Consistent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentComparison {
    pub name: &'static str,
    pub implemented: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub kind: ModelKind,
    pub variable: VariableId,
    pub implemented: ImplementedConditional,
    pub comparisons: Vec<MomentComparison>,
    pub widenings: usize,
    /// Set when the numeric moments could not be pinned down.
    pub flag: Option<String>,
    pub passed: bool,
}

/// Numeric moments of `exp(log_f)` over the variable's support.
struct NumericMoments {
    /// `E[x]` and `Var[x]`, or `E[x]`, `E[1/x]` and `Var[1/x]` when the
    /// inverse moments are requested (`variance` is then NaN).
    mean: f64,
    variance: f64,
    inv_mean: f64,
    inv_variance: f64,
    widenings: usize,
    flag: Option<String>,
}

/// Span in log density below the peak that counts as negligible.
const LOG_DROP: f64 = 46.0;

fn numeric_moments(log_f: &dyn Fn(f64) -> f64, support: Support, inverse: bool) -> Result<NumericMoments> {
    // Positive variables are integrated over t = ln x.
    let to_x = |t: f64| if support == Support::Positive { t.exp() } else { t };
    let log_g = |t: f64| {
        let lf = log_f(to_x(t));
        if support == Support::Positive { lf + t } else { lf }
    };

    // Coarse scan for a window holding the peak, doubling until both ends are
    // negligible.
    const STEPS: usize = 800;
    let mut half = 4.0;
    let (mut lo, mut hi);
    let mut peak;
    loop {
        let (a, b) = if support == Support::NonNegative { (0.0, 2.0 * half) } else { (-half, half) };
        let ts: Vec<f64> = (0..=STEPS).map(|i| a + (b - a) * i as f64 / STEPS as f64).collect();
        let vals: Vec<f64> = ts.iter().map(|&t| log_g(t)).collect();
        let (imax, &vmax) = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .max_by(|x, y| x.1.total_cmp(y.1))
            .ok_or_else(|| Error::domain("conditional density is zero on the scan window"))?;
        peak = (ts[imax], vmax);
        let edge_ok = |v: f64| !(v > vmax - LOG_DROP);
        let left_ok = support == Support::NonNegative || edge_ok(vals[0]);
        if (left_ok && edge_ok(vals[STEPS])) || half > 1e4 {
            let step = (b - a) / STEPS as f64;
            let first = vals.iter().position(|&v| v > vmax - LOG_DROP).unwrap_or(0);
            let last = vals.iter().rposition(|&v| v > vmax - LOG_DROP).unwrap_or(STEPS);
            lo = (ts[first] - step).max(a);
            hi = (ts[last] + step).min(b);
            break;
        }
        half *= 2.0;
    }

    let shift = peak.1;
    let density = |t: f64| (log_g(t) - shift).exp();
    let moments_on = |lo: f64, hi: f64| -> Result<[f64; 5]> {
        let mut out = [0.0; 5];
        let breaks: Vec<f64> = if peak.0 > lo && peak.0 < hi { vec![lo, peak.0, hi] } else { vec![lo, hi] };
        let width = hi - lo;
        // E[x^2] may not exist when the inverse moments are the ones wanted.
        let powers: &[(usize, i32)] =
            if inverse { &[(0, 0), (1, 1), (3, -1), (4, -2)] } else { &[(0, 0), (1, 1), (2, 2)] };
        for &(slot, power) in powers {
            let f = |t: f64| density(t) * to_x(t).powi(power);
            let scale = to_x(peak.0).abs().max(1.0).powi(power.abs());
            for w in breaks.windows(2) {
                out[slot] += integrate_strict(&f, w[0], w[1], 1e-13 * width * scale)?;
            }
        }
        if inverse {
            out[2] = f64::NAN;
        }
        Ok(out)
    };

    let to_moments = |r: [f64; 5]| {
        let m = r[1] / r[0];
        let im = r[3] / r[0];
        (m, r[2] / r[0] - m * m, im, r[4] / r[0] - im * im)
    };
    let mut current = to_moments(moments_on(lo, hi)?);
    let mut widenings = 0;
    let mut flag = None;
    loop {
        let span = hi - lo;
        let (wlo, whi) = if support == Support::NonNegative {
            (lo.max(0.0) - span.min(lo.max(0.0)), hi + span)
        } else {
            (lo - span, hi + span)
        };
        let wider = to_moments(moments_on(wlo, whi)?);
        let agree = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300);
        let settled = agree(current.0, wider.0)
            && if inverse {
                agree(current.2, wider.2) && agree(current.3, wider.3)
            } else {
                agree(current.1, wider.1)
            };
        current = wider;
        lo = wlo;
        hi = whi;
        if settled {
            break;
        }
        widenings += 1;
        if widenings >= 6 {
            flag = Some(format!("moments still moving after {widenings} widenings"));
            break;
        }
    }
    Ok(NumericMoments {
        mean: current.0,
        variance: current.1,
        inv_mean: current.2,
        inv_variance: current.3,
        widenings,
        flag,
    })
}

/// [`brute_conditional_check_with`] under default options.
pub fn brute_conditional_check(kind: ModelKind, inst: &TinyInstance, var: VariableId) -> Result<CheckReport> {
    brute_conditional_check_with(kind, inst, var, &CheckOptions::default())
}

/// Normalizes the oracle's log conditional of `var` numerically and compares
/// its moments with the sampler's closed form.
///
/// Means are compared relative to `max(|mean|, sd)` so that a mean near zero
/// does not inflate the error.
pub fn brute_conditional_check_with(
    kind: ModelKind,
    inst: &TinyInstance,
    var: VariableId,
    options: &CheckOptions,
) -> Result<CheckReport> {
    let (m, n) = (inst.data.n_rows(), inst.data.n_cols());
    if m > 4 || n > 4 || inst.state.k() > 2 {
        return Err(Error::domain("brute-force checks need at most 4x4 data and K <= 2"));
    }
    let implemented = implemented_conditional(kind, inst, var)?.perturbed(options.perturbation);
    let support = var.support();
    let log_f = |x: f64| log_conditional(kind, inst, var, x, options.gttn_hyperprior).unwrap_or(f64::NAN);
    // Evaluate once outside the closure so oracle errors surface.
    log_conditional(kind, inst, var, inst.get(var).max(1e-3), options.gttn_hyperprior)?;
    let num = numeric_moments(&log_f, support, var == VariableId::Sigma2)
        .map_err(|e| Error::domain(format!("{kind} {var:?}: {e}")))?;

    let numeric_of = |name: &str| match name {
        "mean" => num.mean,
        "variance" => num.variance,
        "precision mean" => num.inv_mean,
        "precision variance" => num.inv_variance,
        _ => unreachable!("unknown moment {name}"),
    };
    let implemented_moments = implemented.moments();
    let sd = implemented_moments
        .iter()
        .find(|(k, _)| *k == "variance")
        .map(|&(_, v)| v.sqrt())
        .unwrap_or(0.0);
    let comparisons: Vec<MomentComparison> = implemented_moments
        .into_iter()
        .map(|(name, value)| {
            let numeric = numeric_of(name);
            let scale = if name == "mean" { value.abs().max(sd) } else { value.abs() };
            MomentComparison {
                name,
                implemented: value,
                numeric,
                relative_error: (numeric - value).abs() / scale,
            }
        })
        .collect();
    let passed = num.flag.is_none()
        && comparisons
            .iter()
            .all(|c| c.relative_error.is_finite() && c.relative_error <= options.tolerance);
    Ok(CheckReport {
        kind,
        variable: var,
        implemented,
        comparisons,
        widenings: num.widenings,
        flag: num.flag,
        passed,
    })
}

// ---------------------------------------------------------------------------
// Kernel checks

/// Worst disagreement between the closed-form and quadrature normalizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizerSweep {
    pub points: usize,
    pub max_relative_error: f64,
    /// `(mu, tau, lambda)` at the worst point.
    pub worst: (f64, f64, f64),
}

/// Compares `rn_log_normalizer` with quadrature on a grid of `per_axis`
/// values per parameter: `mu` linear in [-5, 5], `tau` and `lambda`
/// log-spaced in [0.01, 100]. Errors are relative on `C` itself.
pub fn normalizer_sweep(per_axis: usize) -> Result<NormalizerSweep> {
    if per_axis < 2 {
        return Err(Error::domain("normalizer sweep needs at least 2 points per axis"));
    }
    let t = |i: usize| i as f64 / (per_axis - 1) as f64;
    let log_axis = |i: usize| 10f64.powf(-2.0 + 4.0 * t(i));
    let mut out = NormalizerSweep {
        points: 0,
        max_relative_error: 0.0,
        worst: (f64::NAN, f64::NAN, f64::NAN),
    };
    for i in 0..per_axis {
        let mu = -5.0 + 10.0 * t(i);
        for j in 0..per_axis {
            for l in 0..per_axis {
                let (tau, lambda) = (log_axis(j), log_axis(l));
                let closed = rn_log_normalizer(&RnParams::new(mu, tau, lambda)?)?;
                let quad = rn_log_normalizer_by_quadrature(mu, tau, lambda)?;
                let err = (closed - quad).exp_m1().abs();
                out.points += 1;
                if !(err <= out.max_relative_error) {
                    out.max_relative_error = err;
                    out.worst = (mu, tau, lambda);
                }
            }
        }
    }
    Ok(out)
}

/// A sampler family with fixed parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelFamily {
    TruncatedNormal { mean: f64, precision: f64 },
    RectifiedNormal { mean: f64, precision: f64, rate: f64 },
    Gaussian { mean: f64, precision: f64 },
    /// Shape and rate.
    Gamma { shape: f64, rate: f64 },
    /// Shape and scale; shape must exceed 2 for a finite variance.
    InverseGamma { shape: f64, scale: f64 },
    Exponential { rate: f64 },
}

/// Sample mean against the analytic mean, and a Kolmogorov-Smirnov distance
/// against an independent CDF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerCheck {
    pub family: KernelFamily,
    pub draws: usize,
    pub sample_mean: f64,
    pub expected_mean: f64,
    pub standard_error: f64,
    pub ks: f64,
    /// Critical KS distance at significance 0.001.
    pub ks_critical: f64,
}

impl SamplerCheck {
    pub fn z(&self) -> f64 {
        (self.sample_mean - self.expected_mean) / self.standard_error
    }

    pub fn mean_ok(&self) -> bool {
        self.z().abs() <= 3.0
    }

    pub fn ks_ok(&self) -> bool {
        self.ks <= self.ks_critical
    }

    pub fn passed(&self) -> bool {
        self.mean_ok() && self.ks_ok()
    }
}

/// Asymptotic two-sided KS critical distance for `n` draws.
pub fn ks_critical(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

/// KS distance given the CDF at each sorted draw.
pub fn ks_statistic(cdf_at_sorted: &[f64]) -> f64 {
    let n = cdf_at_sorted.len() as f64;
    cdf_at_sorted
        .iter()
        .enumerate()
        .map(|(i, &f)| ((i as f64 + 1.0) / n - f).max(f - i as f64 / n))
        .fold(0.0, f64::max)
}

/// Rectified-normal log density from the quadrature normalizer.
fn rn_oracle_log_density(mu: f64, tau: f64, lambda: f64) -> Result<impl Fn(f64) -> f64> {
    let log_c = rn_log_normalizer_by_quadrature(mu, tau, lambda)?;
    Ok(move |x: f64| oracle_normal_log_pdf(x, mu, tau) + lambda.ln() - lambda * x - log_c)
}

/// Mean and variance of a density on `[0, hi]` by quadrature.
fn quadrature_moments(density: &dyn Fn(f64) -> f64, hi: f64) -> Result<(f64, f64)> {
    let m1 = integrate_strict(&|x| x * density(x), 0.0, hi, 1e-14 * hi)?;
    let m2 = integrate_strict(&|x| x * x * density(x), 0.0, hi, 1e-14 * hi * hi)?;
    Ok((m1, m2 - m1 * m1))
}

fn draw(family: KernelFamily, rng: &mut ChaCha8Rng) -> Result<f64> {
    Ok(match family {
        KernelFamily::TruncatedNormal { mean, precision } => sample_tn(&TnParams::new(mean, precision)?, rng),
        KernelFamily::RectifiedNormal { mean, precision, rate } => sample_rn(&RnParams::new(mean, precision, rate)?, rng),
        KernelFamily::Gaussian { mean, precision } => GaussianParams::new(mean, precision)?.sample(rng),
        KernelFamily::Gamma { shape, rate } => sample_gamma(&GammaParams::new(shape, rate)?, rng),
        KernelFamily::InverseGamma { shape, scale } => sample_inverse_gamma(&InvGammaParams::new(shape, scale)?, rng),
        KernelFamily::Exponential { rate } => sample_exponential(rate, rng),
    })
}

/// Draws `draws` values from the crate's sampler for `family` and compares
/// them with oracle moments and CDFs: the oracle Phi for the normal
/// families, cumulative quadrature for the rectified normal, and regularized
/// incomplete Gamma functions for the Gamma families.
pub fn check_sampler(family: KernelFamily, draws: usize, seed: u64) -> Result<SamplerCheck> {
    check_sampler_against(family, family, draws, seed)
}

/// Draws from `sampler` and scores the draws against the oracle of `family`.
/// With two different settings this is a negative control.
pub fn check_sampler_against(sampler: KernelFamily, family: KernelFamily, draws: usize, seed: u64) -> Result<SamplerCheck> {
    if draws < 2 {
        return Err(Error::domain("need at least 2 draws"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = (0..draws).map(|_| draw(sampler, &mut rng)).collect::<Result<Vec<f64>>>()?;
    let sample_mean = xs.iter().sum::<f64>() / draws as f64;
    xs.sort_by(f64::total_cmp);

    let (mean, var, cdf): (f64, f64, Vec<f64>) = match family {
        KernelFamily::TruncatedNormal { mean, precision } => {
            let (m, v) = tn_moments(&TnParams::new(mean, precision)?);
            let sd = 1.0 / precision.sqrt();
            let log_mass = oracle_normal_log_cdf(mean / sd);
            let cdf = xs
                .iter()
                .map(|&x| -(oracle_normal_log_cdf(-(x - mean) / sd) - log_mass).exp_m1())
                .collect();
            (m, v, cdf)
        }
        KernelFamily::RectifiedNormal { mean, precision, rate } => {
            let log_f = rn_oracle_log_density(mean, precision, rate)?;
            let f = |x: f64| log_f(x).exp();
            let hi = (mean - rate / precision).max(0.0) + 40.0 / precision.sqrt();
            let (m, v) = quadrature_moments(&f, hi)?;
            let mut acc = 0.0;
            let mut prev = 0.0;
            let cdf = xs
                .iter()
                .map(|&x| {
                    if x > prev {
                        acc += gk15(&f, prev, x).0;
                        prev = x;
                    }
                    acc
                })
                .collect();
            (m, v, cdf)
        }
        KernelFamily::Gaussian { mean, precision } => {
            let sd = 1.0 / precision.sqrt();
            let cdf = xs.iter().map(|&x| oracle_normal_cdf((x - mean) / sd)).collect();
            (mean, sd * sd, cdf)
        }
        KernelFamily::Gamma { shape, rate } => {
            let cdf = xs.iter().map(|&x| gamma_lr(shape, rate * x)).collect();
            (shape / rate, shape / (rate * rate), cdf)
        }
        KernelFamily::InverseGamma { shape, scale } => {
            if shape <= 2.0 {
                return Err(Error::domain(format!("inverse-Gamma check needs shape > 2, got {shape}")));
            }
            let m = scale / (shape - 1.0);
            let cdf = xs.iter().map(|&x| gamma_ur(shape, scale / x)).collect();
            (m, m * m / (shape - 2.0), cdf)
        }
        KernelFamily::Exponential { rate } => {
            let cdf = xs.iter().map(|&x| -(-rate * x).exp_m1()).collect();
            (1.0 / rate, 1.0 / (rate * rate), cdf)
        }
    };
    Ok(SamplerCheck {
        family,
        draws,
        sample_mean,
        expected_mean: mean,
        standard_error: (var / draws as f64).sqrt(),
        ks: ks_statistic(&cdf),
        ks_critical: ks_critical(draws, 1e-3),
    })
}

/// `count` truncated-normal settings: the first has parent mean -10 and unit
/// precision; the rest draw the mean uniformly from [-5, 5] and the precision
/// log-uniformly from [0.01, 100].
pub fn tn_settings(count: usize, seed: u64) -> Vec<KernelFamily> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            if i == 0 {
                KernelFamily::TruncatedNormal { mean: -10.0, precision: 1.0 }
            } else {
                KernelFamily::TruncatedNormal {
                    mean: rng.random_range(-5.0..5.0),
                    precision: 10f64.powf(rng.random_range(-2.0..2.0)),
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quad(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> QuadratureResult {
        integrate(&QuadratureSpec { integrand: f, lo, hi, abs_tol: tol, max_subdivisions: 2000 }).unwrap()
    }

    #[test]
    fn erfc_branches_meet() {
        assert_abs_diff_eq!(oracle_normal_cdf(1.0), 0.841_344_746_068_542_9, epsilon = 1e-14);
        assert_abs_diff_eq!(oracle_normal_cdf(0.0), 0.5, epsilon = 1e-16);
        // erfc(2) on both sides of the branch point
        assert_abs_diff_eq!(1.0 - erf_series(2.0), erfc_continued_fraction(2.0), epsilon = 1e-13);
        assert_abs_diff_eq!(oracle_normal_log_cdf(-8.0), 6.220_960_574_271_785e-16f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(oracle_normal_log_cdf(-2.9), oracle_normal_cdf(-2.9).ln(), epsilon = 1e-12);
        let tail = oracle_normal_cdf(-8.0);
        assert!((tail / 6.220_960_574_271_785e-16 - 1.0).abs() < 1e-12, "{tail}");
    }

    #[test]
    fn quadrature_reference_integrals() {
        let r = quad(&|x: f64| (-x).exp(), 0.0, 60.0, 1e-12);
        assert!(r.converged);
        assert_abs_diff_eq!(r.value, 1.0, epsilon = 1e-10);
        let r = quad(&|x: f64| oracle_normal_log_pdf(x, 0.0, 1.0).exp(), 0.0, 12.0, 1e-12);
        assert_abs_diff_eq!(r.value, 0.5, epsilon = 1e-8);
        let c = rn_normalizer_by_quadrature(0.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(c, 0.261_578, epsilon = 1e-5);
        let c = rn_normalizer_by_quadrature(1.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(c, 0.303_27, epsilon = 1e-5);
        // Far tails stay finite in log space.
        assert!(rn_log_normalizer_by_quadrature(-1.0, 1e20, 1.0).unwrap().is_finite());
        assert!(rn_log_normalizer_by_quadrature(2.0, 1e-20, 1e12).unwrap().is_finite());
    }

    #[test]
    fn quadrature_flags_exhausted_budget() {
        let f = |x: f64| (50.0 * x).sin() / x.sqrt();
        let r = integrate(&QuadratureSpec { integrand: &f, lo: 1e-12, hi: 1.0, abs_tol: 1e-15, max_subdivisions: 3 }).unwrap();
        assert!(!r.converged);
        assert!(integrate(&QuadratureSpec { integrand: &f, lo: 1.0, hi: 0.0, abs_tol: 1e-8, max_subdivisions: 3 }).is_err());
    }

    #[test]
    fn tn_moment_identities_match_quadrature() {
        for &(mu, tau) in &[(0.0, 1.0), (5.0, 100.0), (-10.0, 1.0), (-3.0, 4.0), (4.5, 0.25), (-0.2, 9.0)] {
            let (m, v) = tn_moments(&TnParams { parent_mean: mu, parent_precision: tau });
            let sigma = 1.0 / f64::sqrt(tau);
            let hi = f64::max(mu, 0.0) + 14.0 * sigma;
            // Shift the log density by its value at the mode of the truncated density.
            let mode = f64::max(mu, 0.0);
            let g = |x: f64| (-0.5 * tau * ((x - mu).powi(2) - (mode - mu).powi(2))).exp();
            let z = quad(&g, 0.0, hi, 1e-15).value;
            let m1 = quad(&|x: f64| x * g(x), 0.0, hi, 1e-15).value / z;
            let m2 = quad(&|x: f64| x * x * g(x), 0.0, hi, 1e-15).value / z;
            assert!((m - m1).abs() <= 1e-8 * m1, "mean ({mu},{tau}): {m} vs {m1}");
            assert!((v - (m2 - m1 * m1)).abs() <= 1e-8 * v.max(1e-6), "var ({mu},{tau}): {v} vs {}", m2 - m1 * m1);
        }
        let (m, _) = tn_moments(&TnParams { parent_mean: 0.0, parent_precision: 1.0 });
        assert_abs_diff_eq!(m, (2.0 / PI).sqrt(), epsilon = 1e-14);
        let (m, _) = tn_moments(&TnParams { parent_mean: -10.0, parent_precision: 1.0 });
        assert_abs_diff_eq!(m, 0.098_093_233_962_5, epsilon = 1e-12);
    }

    #[test]
    fn hand_case_w_passes_and_perturbation_fails() {
        let inst = TinyInstance::hand_1x1();
        let r = brute_conditional_check(ModelKind::Grrn, &inst, VariableId::W(0, 0)).unwrap();
        assert!(r.passed, "{r:#?}");
        assert_eq!(r.implemented, ImplementedConditional::TruncatedNormal { mean: 1.0, precision: 2.0 });
        let opts = CheckOptions { perturbation: 1.1, ..CheckOptions::default() };
        let r = brute_conditional_check_with(ModelKind::Grrn, &inst, VariableId::W(0, 0), &opts).unwrap();
        assert!(!r.passed, "{r:#?}");
    }

    #[test]
    fn sigma2_mean_matches_inverse_gamma() {
        let inst = TinyInstance::random(3, 3, 2, 4);
        let r = brute_conditional_check(ModelKind::Gtt, &inst, VariableId::Sigma2).unwrap();
        assert!(r.passed, "{r:#?}");
        let mean = r.comparisons.iter().find(|c| c.name == "mean").unwrap();
        assert!(mean.relative_error < 1e-3);
    }

    #[test]
    fn gttn_tau_shape_depends_on_hyperprior_form() {
        let inst = TinyInstance::random(2, 2, 1, 6);
        let var = VariableId::TauW(1, 0);
        let r = brute_conditional_check(ModelKind::Gttn, &inst, var).unwrap();
        assert!(r.passed, "{r:#?}");
        let printed = CheckOptions { gttn_hyperprior: GttnHyperprior::WithInverseSqrtTau, ..CheckOptions::default() };
        let r = brute_conditional_check_with(ModelKind::Gttn, &inst, var, &printed).unwrap();
        assert!(!r.passed);
        // The numeric mean is then (a) / rate rather than (a + 1/2) / rate.
        let ImplementedConditional::Gamma { shape, rate } = r.implemented else { panic!() };
        let numeric_mean = r.comparisons[0].numeric;
        assert!((numeric_mean - (shape - 0.5) / rate).abs() < 1e-6 * numeric_mean);
    }

    #[test]
    fn rejects_large_instances() {
        let inst = TinyInstance::random(5, 2, 1, 1);
        assert!(brute_conditional_check(ModelKind::Gee, &inst, VariableId::Sigma2).is_err());
    }
}
