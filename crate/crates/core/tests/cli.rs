use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bnmf::cli::{read_aggregate, read_prediction, read_results, read_trace, CliConfig};
use bnmf::data::{load_ratings, RatingsFile, RatingsFormat};
use bnmf::harness::aggregate;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic.tsv")
}

fn bnmf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnmf")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn fit(out: &Path, extra: &[&str]) -> Output {
    let data = fixture();
    let mut args = vec![
        "fit",
        "--dataset",
        data.to_str().unwrap(),
        "--format",
        "synthetic",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    bnmf(&args)
}

fn manifest(dir: &Path) -> toml::Table {
    fs::read_to_string(dir.join("manifest.toml")).unwrap().parse().unwrap()
}

#[test]
fn fit_writes_one_trace_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let o = fit(&out, &["--model", "GRRN", "--k", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = read_trace(&out.join("trace.csv")).unwrap();
    assert_eq!(trace.train_mse.len(), 500);
    assert!(trace.test_mse.is_none());
    let pred = read_prediction(&out.join("prediction.csv")).unwrap();
    assert_eq!(pred.dim(), (30, 20));
    let m = manifest(&out);
    assert_eq!(m["run"]["retained_samples"].as_integer(), Some(100));
    assert_eq!(m["dataset"]["sha256"].as_str().unwrap().len(), 64);
    assert!(m["wall_seconds"].as_float().unwrap() >= 0.0);
}

#[test]
fn every_model_fits_with_a_full_manifest() {
    let dir = tempfile::tempdir().unwrap();
    for model in ["GRRN", "GEE", "GTT", "GTTN", "NPNMF"] {
        let out = dir.path().join(model);
        let o = fit(&out, &["--model", model, "--k", "3", "--fraction", "0.5", "--iterations", "20", "--burn-in", "10"]);
        assert_eq!(code(&o), 0, "{model}: {}", String::from_utf8_lossy(&o.stderr));
        let m = manifest(&out);
        assert_eq!(m["run"]["model"].as_str(), Some(model));
        assert!(m["run"]["test_mse_of_posterior_mean"].as_float().unwrap() > 0.0);
    }
}

#[test]
fn manifest_records_resolved_beta_lambda() {
    let data = load_ratings(&RatingsFile::new(fixture(), RatingsFormat::Synthetic)).unwrap();
    let values = data.observed_values();
    let m0 = values.iter().sum::<f64>() / values.len() as f64;
    let expected = (m0 / 10.0).sqrt();

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit");
    let o = fit(&out, &["--k", "10", "--iterations", "20", "--burn-in", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    let beta = m["run"]["beta_lambda"].as_float().unwrap();
    assert!((beta - expected).abs() < 1e-12, "{beta} vs {expected}");
    assert_eq!(m["resolved_hyper"]["beta_lambda"]["fixed"].as_float(), Some(beta));
}

#[test]
fn missing_dataset_is_an_input_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = bnmf(&["fit", "--dataset", "/nonexistent/u.data", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(!out.exists());
}

#[test]
fn bad_config_is_a_validation_error_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "schema_version = 1\nunknown_key = true\n").unwrap();
    let o = fit(&out, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = fit(&out, &["--burn-in", "500"]);
    assert_eq!(code(&o), 2);
    let o = fit(&out, &["--model", "XYZ"]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn sparsity_sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sparsity");
    let o = bnmf(&[
        "sparsity",
        "--dataset",
        fixture().to_str().unwrap(),
        "--format",
        "synthetic",
        "--model",
        "GRRN",
        "--model",
        "GTT",
        "--k",
        "2,3",
        "--fraction",
        "0.5,0.7",
        "--repeats",
        "3",
        "--iterations",
        "30",
        "--burn-in",
        "20",
        "--threads",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cells = read_results(&out.join("results.csv")).unwrap();
    assert_eq!(cells.len(), 24);
    assert!(cells.iter().all(|c| c.test_mse_of_posterior_mean.is_some()));
    let aggs = read_aggregate(&out.join("aggregate.csv")).unwrap();
    assert_eq!(aggs.len(), 8);
    assert_eq!(aggregate(&cells), aggs);
    let timings = fs::read_to_string(out.join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 25);
}

fn convergence(out: &Path) -> Output {
    bnmf(&[
        "convergence",
        "--dataset",
        fixture().to_str().unwrap(),
        "--format",
        "synthetic",
        "--model",
        "GRRN,NPNMF",
        "--k",
        "3",
        "--repeats",
        "2",
        "--iterations",
        "40",
        "--burn-in",
        "30",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn convergence_writes_one_curve_per_model_and_k() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("conv");
    let o = convergence(&out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["GRRN_K3.csv", "NPNMF_K3.csv"] {
        let text = fs::read_to_string(out.join("curves").join(name)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iteration,mean_train_mse,std_train_mse,repeat_0,repeat_1"));
        assert_eq!(lines.count(), 40);
    }
    let cells = read_results(&out.join("results.csv")).unwrap();
    assert!(cells.iter().all(|c| c.test_mse_of_posterior_mean.is_none() && c.level.is_none()));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&convergence(&a)), 0);
    assert_eq!(code(&convergence(&b)), 0);
    for f in ["results.csv", "aggregate.csv", "curves/GRRN_K3.csv", "curves/NPNMF_K3.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (c, d) = (dir.path().join("c"), dir.path().join("d"));
    for out in [&c, &d] {
        assert_eq!(code(&fit(out, &["--model", "GTTN", "--k", "4", "--fraction", "0.4", "--seed", "11"])), 0);
    }
    for f in ["trace.csv", "prediction.csv"] {
        assert_eq!(fs::read(c.join(f)).unwrap(), fs::read(d.join(f)).unwrap(), "{f}");
    }
    assert!(read_trace(&c.join("trace.csv")).unwrap().test_mse.is_some());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    assert_eq!(code(&fit(&first, &["--model", "GEE", "--k", "3", "--iterations", "50", "--burn-in", "25", "--seed", "4"])), 0);
    let echoed = fs::read_to_string(first.join("config.toml")).unwrap();
    let config: CliConfig = toml::from_str(&echoed).unwrap();
    assert_eq!(config.seed, 4);
    let second = dir.path().join("second");
    let o = bnmf(&["fit", "--config", first.join("config.toml").to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(first.join("trace.csv")).unwrap(), fs::read(second.join("trace.csv")).unwrap());
}

#[test]
fn failed_cells_are_recorded_and_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("neg.tsv");
    let mut text = fs::read_to_string(fixture()).unwrap();
    text.push_str("0\t0\t-4.0\n");
    fs::write(&data, text).unwrap();
    let out = dir.path().join("out");
    let o = bnmf(&[
        "convergence",
        "--dataset",
        data.to_str().unwrap(),
        "--format",
        "synthetic",
        "--model",
        "NPNMF,GRRN",
        "--k",
        "2",
        "--repeats",
        "1",
        "--iterations",
        "10",
        "--burn-in",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4);
    let cells = read_results(&out.join("results.csv")).unwrap();
    assert!(cells[0].error.is_some() && cells[0].diverged);
    assert!(cells[1].error.is_none());
}

#[test]
fn validate_data_prints_summary() {
    let o = bnmf(&["validate-data", "--dataset", fixture().to_str().unwrap(), "--format", "synthetic"]);
    assert_eq!(code(&o), 0);
    let t: toml::Table = String::from_utf8(o.stdout).unwrap().parse().unwrap();
    assert_eq!(t["rows"].as_integer(), Some(30));
    assert_eq!(t["cols"].as_integer(), Some(20));
    assert_eq!(t["observed"].as_integer(), Some(600));
}

#[test]
fn generated_synthetic_data_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.tsv");
    let o = bnmf(&["generate-synthetic", "--rows", "6", "--cols", "4", "--k-true", "2", "--seed", "3", "--out", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let data = load_ratings(&RatingsFile::new(&path, RatingsFormat::Synthetic)).unwrap();
    assert_eq!((data.n_rows(), data.n_cols(), data.observed_count()), (6, 4, 24));
}
