//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The MovieLens 100K criteria read `data/ml-100k/u.data` at the workspace
//! root, or the file named by `BNMF_ML100K`. The dataset is not bundled;
//! without it those criteria report FAIL.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use bnmf::data::{clean_min_observed, load_ratings, split_train_test, synthetic_generate, RatingsFile, RatingsFormat, SplitSpec};
use bnmf::harness::{run_convergence, run_noise, run_sparsity, ExperimentKind, ExperimentResult, ExperimentSpec};
use bnmf::model::{HyperParams, ObservedMatrix};
use bnmf::samplers::{run_model, GibbsSampler, ModelKind, RunConfig};
use bnmf::verification::{
    brute_conditional_check, brute_conditional_check_with, check_sampler, normalizer_sweep, tn_settings, CheckOptions,
    TinyInstance, VariableId,
};

type Outcome = Result<(bool, String), String>;

const BAYESIAN: [ModelKind; 4] = [ModelKind::Grrn, ModelKind::Gee, ModelKind::Gtt, ModelKind::Gttn];
const SEED: u64 = 20_240_601;

fn ml100k_path() -> PathBuf {
    std::env::var_os("BNMF_ML100K")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data"))
}

fn ml100k() -> Result<ObservedMatrix, String> {
    let path = ml100k_path();
    let raw = load_ratings(&RatingsFile::new(&path, RatingsFormat::UData))
        .map_err(|e| format!("MovieLens 100K unavailable ({e})"))?;
    clean_min_observed(&raw, 3).map_err(|e| e.to_string())
}

fn base(seed: u64) -> RunConfig {
    RunConfig::new(ModelKind::Grrn, 1, seed)
}

fn sparsity(models: &[ModelKind], k: usize, fraction: f64, repeats: usize, data: &ObservedMatrix) -> Result<ExperimentResult, String> {
    let mut spec = ExperimentSpec::new(ExperimentKind::Sparsity, models.to_vec(), vec![k], vec![fraction], base(SEED));
    spec.repeats = repeats;
    spec.threads = Some(1);
    run_sparsity(&spec, data).map_err(|e| e.to_string())
}

fn test_mse(r: &ExperimentResult, model: ModelKind, k: usize, level: f64) -> Result<f64, String> {
    r.aggregate(model, k, Some(level))
        .and_then(|a| a.test_mse_of_posterior_mean)
        .map(|s| s.mean)
        .ok_or_else(|| format!("no held-out MSE for {model} K={k}"))
}

fn kernel() -> Outcome {
    let sweep = normalizer_sweep(9).map_err(|e| e.to_string())?;
    let mut within = 0;
    let mut worst_z: f64 = 0.0;
    for (i, family) in tn_settings(20, 2024).into_iter().enumerate() {
        let c = check_sampler(family, 100_000, 100 + i as u64).map_err(|e| e.to_string())?;
        within += usize::from(c.mean_ok());
        worst_z = worst_z.max(c.z().abs());
    }
    let ok = sweep.max_relative_error < 1e-5 && within == 20;
    Ok((
        ok,
        format!(
            "normalizer max rel err {:.1e} over {} points (< 1e-5); TN means {within}/20 within 3 SE (worst {worst_z:.2} SE) at 1e5 draws",
            sweep.max_relative_error, sweep.points
        ),
    ))
}

fn conditionals() -> Outcome {
    let mut instances = vec![TinyInstance::hand_1x1()];
    instances.extend((0..4).map(|s| TinyInstance::random(3, 4, 2, s)));
    let (mut checked, mut failed) = (0, Vec::new());
    for inst in &instances {
        let (m, n, k) = (inst.data.n_rows(), inst.data.n_cols(), inst.state.k());
        for kind in BAYESIAN {
            for var in VariableId::all(kind, m, n, k) {
                let r = brute_conditional_check(kind, inst, var).map_err(|e| e.to_string())?;
                checked += 1;
                if !r.passed {
                    failed.push(format!("{kind} {var:?}"));
                }
            }
        }
    }
    let inst = TinyInstance::random(3, 3, 2, 11);
    let opts = CheckOptions { perturbation: 1.1, ..CheckOptions::default() };
    let controls = [
        (ModelKind::Grrn, VariableId::W(1, 0)),
        (ModelKind::Gee, VariableId::Z(1, 2)),
        (ModelKind::Grrn, VariableId::MuW(0, 1)),
        (ModelKind::Gttn, VariableId::TauZ(0, 0)),
        (ModelKind::Grrn, VariableId::LambdaZ(1, 1)),
        (ModelKind::Gtt, VariableId::Sigma2),
    ];
    let mut caught = 0;
    for (kind, var) in controls {
        caught += usize::from(!brute_conditional_check_with(kind, &inst, var, &opts).map_err(|e| e.to_string())?.passed);
    }
    Ok((
        failed.is_empty() && caught == controls.len(),
        format!(
            "{}/{checked} conditionals pass (hand 1x1 + 4 random 3x4, K=2); negative control caught {caught}/{}{}",
            checked - failed.len(),
            controls.len(),
            if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
        ),
    ))
}

fn synthetic_recovery() -> Outcome {
    let mut mses = Vec::new();
    for seed in 0..10 {
        let (data, _, _) = synthetic_generate(50, 40, 5, 0.1, seed).map_err(|e| e.to_string())?;
        let trace = run_model(&RunConfig::new(ModelKind::Grrn, 5, 1000 + seed), &data, None).map_err(|e| e.to_string())?;
        mses.push(trace.train_mse_mean_of_samples);
    }
    let good = mses.iter().filter(|&&m| m <= 0.02).count();
    let worst = mses.iter().copied().fold(0.0, f64::max);
    Ok((good >= 9, format!("{good}/10 seeds with post-burn-in train MSE <= 0.02 (worst {worst:.4})")))
}

fn table3(data: &ObservedMatrix) -> Outcome {
    let dims_ok = (data.n_rows(), data.n_cols(), data.observed_count()) == (943, 1473, 99_723);
    let density_ok = (data.density() - 0.072).abs() <= 0.001;
    let k20 = sparsity(&[ModelKind::Grrn], 20, 0.97, 3, data)?;
    let grrn20 = test_mse(&k20, ModelKind::Grrn, 20, 0.97)?;
    let k40 = sparsity(&BAYESIAN, 40, 0.97, 3, data)?;
    let [grrn, gee, gtt, gttn] = BAYESIAN.map(|m| test_mse(&k40, m, 40, 0.97));
    let (grrn, gee, gtt, gttn) = (grrn?, gee?, gtt?, gttn?);
    let ordered = grrn < gtt && gtt <= gttn && gttn < gee;
    let ok = (dims_ok || density_ok) && (grrn20 - 1.02).abs() <= 0.15 && ordered;
    Ok((
        ok,
        format!(
            "cleaned {}x{} with {} observed, density {:.4}; K=20 f=0.97 GRRN {grrn20:.3} (1.02 +- 0.15, 3 repeats); \
             K=40 f=0.97 GRRN {grrn:.3} < GTT {gtt:.3} <= GTTN {gttn:.3} < GEE {gee:.3}: {ordered}",
            data.n_rows(),
            data.n_cols(),
            data.observed_count(),
            data.density()
        ),
    ))
}

fn divergence(data: &ObservedMatrix) -> Outcome {
    let r = sparsity(&[ModelKind::Gee, ModelKind::Grrn], 50, 0.98, 1, data)?;
    let gee = test_mse(&r, ModelKind::Gee, 50, 0.98)?;
    let grrn = test_mse(&r, ModelKind::Grrn, 50, 0.98)?;
    Ok((gee > 1e3 && grrn < 2.0, format!("K=50 f=0.98: GEE {gee:.4e} (> 1e3), GRRN {grrn:.3} (< 2)")))
}

fn figure_properties(data: &ObservedMatrix) -> Outcome {
    let mut spec = ExperimentSpec::new(ExperimentKind::Convergence, vec![ModelKind::Grrn], vec![20, 50], vec![], base(SEED));
    spec.repeats = 1;
    spec.threads = Some(1);
    let conv = run_convergence(&spec, data).map_err(|e| e.to_string())?;
    let train = |k| {
        conv.aggregate(ModelKind::Grrn, k, None)
            .and_then(|a| a.train_mse_mean_of_samples)
            .map(|s| s.mean)
            .ok_or("missing convergence cell")
    };
    let (t20, t50) = (train(20)?, train(50)?);

    let ladder = bnmf::cli::NOISE_LADDER.to_vec();
    let mut spec = ExperimentSpec::new(ExperimentKind::Noise, vec![ModelKind::Grrn], vec![10], ladder.clone(), base(SEED));
    spec.repeats = 1;
    spec.threads = Some(1);
    let noise = run_noise(&spec, data).map_err(|e| e.to_string())?;
    let metric: Vec<f64> = ladder
        .iter()
        .map(|&r| {
            noise
                .aggregate(ModelKind::Grrn, 10, Some(r))
                .and_then(|a| a.variance_ratio)
                .map(|s| s.mean)
                .ok_or("missing noise cell")
        })
        .collect::<Result<_, _>>()?;
    let max_at_zero = metric.iter().all(|&m| m <= metric[0]);
    let inversions = metric.windows(2).filter(|w| w[1] > w[0]).count();
    let ok = t50 <= t20 && max_at_zero && inversions <= 1;
    Ok((
        ok,
        format!(
            "GRRN train MSE K=50 {t50:.4} <= K=20 {t20:.4}; GRRN K=10 variance/MSE over ratios {ladder:?}: [{}], max at 0: {max_at_zero}, inversions {inversions} (<= 1)",
            metric.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn run_bin(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bnmf")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("bnmf {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism(ml: Option<&Path>) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic.tsv");
    let fixture = fixture.to_str().unwrap();
    let mut compared = 0;
    let mut differing = Vec::new();
    let mut pair = |name: &str, args: &[&str], files: &[&str]| -> Result<(), String> {
        let (a, b) = (dir.path().join(format!("{name}_a")), dir.path().join(format!("{name}_b")));
        for out in [&a, &b] {
            let mut full = args.to_vec();
            full.extend(["--out", out.to_str().unwrap()]);
            run_bin(&full)?;
        }
        for f in files {
            compared += 1;
            let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));
            if read(a.join(f))? != read(b.join(f))? {
                differing.push(format!("{name}/{f}"));
            }
        }
        Ok(())
    };
    for model in ["GRRN", "GEE", "GTT", "GTTN", "NPNMF"] {
        pair(
            &format!("fit_{model}"),
            &["fit", "--dataset", fixture, "--format", "synthetic", "--model", model, "--k", "4", "--fraction", "0.3", "--seed", "17"],
            &["trace.csv", "prediction.csv"],
        )?;
    }
    pair(
        "sparsity",
        &[
            "sparsity", "--dataset", fixture, "--format", "synthetic", "--model", "GRRN,GEE,GTT,GTTN,NPNMF", "--k", "2,4",
            "--fraction", "0.4,0.6", "--repeats", "2", "--iterations", "60", "--burn-in", "40", "--seed", "3",
        ],
        &["results.csv", "aggregate.csv"],
    )?;
    pair(
        "convergence",
        &[
            "convergence", "--dataset", fixture, "--format", "synthetic", "--model", "GRRN,GTTN", "--k", "3", "--repeats", "2",
            "--iterations", "50", "--burn-in", "25",
        ],
        &["results.csv", "aggregate.csv", "curves/GRRN_K3.csv", "curves/GTTN_K3.csv"],
    )?;
    pair(
        "noise",
        &[
            "noise", "--dataset", fixture, "--format", "synthetic", "--k", "3", "--noise", "0,1", "--repeats", "2",
            "--iterations", "40", "--burn-in", "20",
        ],
        &["results.csv", "aggregate.csv"],
    )?;
    if let Some(ml) = ml {
        let ml = ml.to_str().unwrap();
        pair(
            "ml100k",
            &["fit", "--dataset", ml, "--k", "10", "--fraction", "0.97", "--iterations", "30", "--burn-in", "20", "--seed", "5"],
            &["trace.csv", "prediction.csv"],
        )?;
    }
    Ok((
        differing.is_empty(),
        format!(
            "{}/{compared} trace and result files byte-identical across reruns{}",
            compared - differing.len(),
            if differing.is_empty() { String::new() } else { format!("; differing: {}", differing.join(", ")) }
        ),
    ))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn complexity(data: &ObservedMatrix) -> Outcome {
    let hyper = HyperParams::default();
    let ks = [10usize, 20, 40];
    let mut per_sweep = Vec::new();
    for &k in &ks {
        let mut s = GibbsSampler::new(ModelKind::Grrn, k, &hyper, data, 9).map_err(|e| e.to_string())?;
        s.sweep().map_err(|e| e.to_string())?;
        let mut reps = Vec::new();
        for _ in 0..3 {
            let start = Instant::now();
            for _ in 0..3 {
                s.sweep().map_err(|e| e.to_string())?;
            }
            reps.push(start.elapsed().as_secs_f64() / 3.0);
        }
        per_sweep.push(median(reps));
    }
    let r1 = per_sweep[1] / per_sweep[0];
    let r2 = per_sweep[2] / per_sweep[1];
    Ok((
        r1 <= 4.0 && r2 <= 4.0,
        format!(
            "GRRN per-sweep median of 3 repeats on {} observed: K=10 {:.1} ms, K=20 {:.1} ms, K=40 {:.1} ms; ratios {r1:.2}, {r2:.2} (<= 4)",
            data.observed_count(),
            per_sweep[0] * 1e3,
            per_sweep[1] * 1e3,
            per_sweep[2] * 1e3
        ),
    ))
}

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(e) => (false, e),
        };
        let limit = limit.map(|l| format!(", limit {}s", l.as_secs())).unwrap_or_default();
        println!("[{}] {name}: {detail} ({:.1}s{limit})", if ok { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
        self.failures += usize::from(!ok);
    }
}

fn main() {
    let mut report = Report { failures: 0 };
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    report.run("distribution kernel", minutes(1), kernel);
    report.run("conditional correctness", minutes(5), conditionals);
    report.run("synthetic recovery", minutes(2), synthetic_recovery);

    let ml = ml100k();
    let ml_split = |f: fn(&ObservedMatrix) -> Outcome| -> Outcome { ml.as_ref().map_err(Clone::clone).and_then(f) };
    report.run("MovieLens 100K table reproduction", minutes(30), || ml_split(table3));
    report.run("divergence reproduction", None, || ml_split(divergence));
    report.run("qualitative figure properties", None, || ml_split(figure_properties));
    let ml_path = ml.is_ok().then(ml100k_path);
    report.run("determinism", None, || determinism(ml_path.as_deref()));
    report.run("complexity", None, || {
        ml_split(|d| {
            // Fixed data: the K=20, f=0.97 training set.
            let (train, _) = split_train_test(d, &SplitSpec { fraction_unobserved: 0.97, seed: SEED }).map_err(|e| e.to_string())?;
            complexity(&train)
        })
    });

    println!("{} of 8 criteria failed", report.failures);
    if report.failures > 0 {
        std::process::exit(1);
    }
}
