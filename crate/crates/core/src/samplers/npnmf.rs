//! Masked multiplicative updates for the non-probabilistic baseline.

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{usable_test, ModelKind, RunConfig, RunTrace};
use crate::error::{Error, Result};
use crate::model::{masked_mse, ObservedMatrix};

/// Added to every update denominator.
pub const NPNMF_EPSILON: f64 = 1e-9;

/// One masked update of `W` then `Z`.
fn step(masked_a: &Array2<f64>, mask: &Array2<f64>, w: &mut Array2<f64>, z: &mut Array2<f64>) {
    let masked_wz = w.dot(z) * mask;
    let num = masked_a.dot(&z.t());
    let den = masked_wz.dot(&z.t());
    Zip::from(&mut *w).and(&num).and(&den).for_each(|x, &n, &d| *x *= n / (d + NPNMF_EPSILON));

    let masked_wz = w.dot(z) * mask;
    let num = w.t().dot(masked_a);
    let den = w.t().dot(&masked_wz);
    Zip::from(&mut *z).and(&num).and(&den).for_each(|x, &n, &d| *x *= n / (d + NPNMF_EPSILON));
}

/// Runs `config.iterations` multiplicative steps from a uniform random start
/// with mean `sqrt(m0 / K)` per entry.
///
/// The trace reports the final iterate: `posterior_mean` is its `WZ` and the
/// "mean of samples" fields equal its MSEs. `sigma2` is all NaN.
pub fn run_npnmf(config: &RunConfig, train: &ObservedMatrix, test: Option<&ObservedMatrix>) -> Result<RunTrace> {
    config.validate()?;
    if config.kind != ModelKind::Npnmf {
        return Err(Error::config(format!("run_npnmf called with {}", config.kind)));
    }
    if train.observed_count() == 0 {
        return Err(Error::domain("training data has no observed entries"));
    }
    if let Some((i, j, v)) = train.observed().find(|&(_, _, v)| v < 0.0) {
        return Err(Error::domain(format!("NP-NMF needs nonnegative data, got {v} at ({i}, {j})")));
    }
    let test = usable_test(train, test)?;
    let (m, n, k) = (train.n_rows(), train.n_cols(), config.k);

    let mask = train.mask().mapv(|b| if b { 1.0 } else { 0.0 });
    let masked_a = Zip::from(train.values())
        .and(train.mask())
        .map_collect(|&a, &b| if b { a } else { 0.0 });

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = 2.0 * (train.observed_mean()? / k as f64).sqrt();
    let mut w = Array2::from_shape_simple_fn((m, k), || rng.random::<f64>() * scale);
    let mut z = Array2::from_shape_simple_fn((k, n), || rng.random::<f64>() * scale);

    let mut train_mse = Vec::with_capacity(config.iterations);
    let mut test_mse = test.map(|_| Vec::with_capacity(config.iterations));
    for _ in 0..config.iterations {
        step(&masked_a, &mask, &mut w, &mut z);
        let wz = w.dot(&z);
        train_mse.push(masked_mse(train, &wz, None)?);
        if let (Some(t), Some(out)) = (test, test_mse.as_mut()) {
            out.push(masked_mse(t, &wz, None)?);
        }
    }

    let last_train = *train_mse.last().expect("iterations > 0");
    let last_test = test_mse.as_ref().map(|t| *t.last().expect("iterations > 0"));
    Ok(RunTrace {
        kind: config.kind,
        k,
        seed: config.seed,
        hyper: config.hyper.resolved(train, k)?,
        sigma2: vec![f64::NAN; config.iterations],
        posterior_mean: w.dot(&z),
        retained_samples: 1,
        train_mse_mean_of_samples: last_train,
        test_mse_mean_of_samples: last_test,
        train_mse_of_posterior_mean: last_train,
        test_mse_of_posterior_mean: last_test,
        train_mse,
        test_mse,
        gee_clamps: 0,
    })
}
