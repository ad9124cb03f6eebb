//! Command-line front end: config resolution, dataset loading and the files
//! written by each command.
//!
//! Settings resolve as built-in defaults, then the `--config` file, then
//! flags. Every input is loaded and validated before the output directory is
//! touched, so a bad path or config leaves nothing behind.
//!
//! Output files:
//!
//! | command | file | header |
//! |---|---|---|
//! | fit | `trace.csv` | `iteration,train_mse,test_mse,sigma2` |
//! | fit | `prediction.csv` | `row,col,observed,prediction` |
//! | experiments | `results.csv` | see [`RESULTS_HEADER`] |
//! | experiments | `aggregate.csv` | see [`AGGREGATE_HEADER`] |
//! | experiments | `timings.csv` | `experiment,model,K,fraction_or_ratio,repeat,wall_seconds` |
//! | convergence | `curves/<MODEL>_K<k>.csv` | `iteration,mean_train_mse,std_train_mse,repeat_0,...` |
//! | all but validate-data | `manifest.toml`, `config.toml` | |
//!
//! Missing values are empty fields. Floats are written in Rust's shortest
//! round-trip form.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{clean_min_observed, parse_ratings, split_train_test, synthetic_generate, write_triples, RatingsFormat, SplitSpec};
use crate::error::{Error, Result};
use crate::harness::{run_experiment, CellResult, Curve, ExperimentKind, ExperimentResult, ExperimentSpec, Stat, Aggregate};
use crate::model::{HyperParams, ObservedMatrix};
use crate::samplers::{run_model, ModelKind, RunConfig, RunTrace};

pub const SCHEMA_VERSION: u32 = 1;

/// Noise-to-signal ratios used when a noise run names none.
pub const NOISE_LADDER: [f64; 8] = [0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

pub const RESULTS_HEADER: [&str; 17] = [
    "experiment",
    "model",
    "K",
    "fraction_or_ratio",
    "repeat",
    "seed",
    "split_seed",
    "noise_seed",
    "train_mse_mean_of_samples",
    "train_mse_of_posterior_mean",
    "test_mse_mean_of_samples",
    "test_mse_of_posterior_mean",
    "variance_ratio",
    "variance_ratio_clean",
    "diverged_flag",
    "gee_clamps",
    "error",
];

pub const AGGREGATE_HEADER: [&str; 15] = [
    "experiment",
    "model",
    "K",
    "fraction_or_ratio",
    "repeats",
    "completed",
    "diverged",
    "train_mse_mean",
    "train_mse_std",
    "test_mse_mean",
    "test_mse_std",
    "variance_ratio_mean",
    "variance_ratio_std",
    "variance_ratio_clean_mean",
    "variance_ratio_clean_std",
];

const TRACE_HEADER: [&str; 4] = ["iteration", "train_mse", "test_mse", "sigma2"];
const PREDICTION_HEADER: [&str; 4] = ["row", "col", "observed", "prediction"];
const TIMINGS_HEADER: [&str; 6] = ["experiment", "model", "K", "fraction_or_ratio", "repeat", "wall_seconds"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Fit,
    Convergence,
    Noise,
    Sparsity,
    ValidateData,
}

impl Command {
    fn experiment(self) -> Option<ExperimentKind> {
        match self {
            Command::Convergence => Some(ExperimentKind::Convergence),
            Command::Noise => Some(ExperimentKind::Noise),
            Command::Sparsity => Some(ExperimentKind::Sparsity),
            Command::Fit | Command::ValidateData => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub format: RatingsFormat,
    /// Rows and columns with fewer observed entries are removed repeatedly;
    /// 0 disables cleaning.
    pub min_observed: usize,
}

/// Fully resolved settings of one invocation. Written back as `config.toml`,
/// which `--config` accepts unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub schema_version: u32,
    pub command: Command,
    pub models: Vec<ModelKind>,
    pub k: Vec<usize>,
    /// Fractions of the full grid left unobserved (sparsity; optional single
    /// value for fit).
    pub fractions: Vec<f64>,
    /// Noise-to-signal ratios.
    pub noise: Vec<f64>,
    pub iterations: usize,
    pub burn_in: usize,
    pub repeats: usize,
    pub seed: u64,
    pub threads: usize,
    /// Share of observed cells scored in the noise experiment.
    pub noise_holdout: f64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub hyper: HyperParams,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileDataset {
    path: Option<PathBuf>,
    format: Option<RatingsFormat>,
    min_observed: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    schema_version: u32,
    command: Option<Command>,
    models: Option<Vec<ModelKind>>,
    k: Option<Vec<usize>>,
    fractions: Option<Vec<f64>>,
    noise: Option<Vec<f64>>,
    iterations: Option<usize>,
    burn_in: Option<usize>,
    repeats: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
    noise_holdout: Option<f64>,
    out: Option<PathBuf>,
    dataset: Option<FileDataset>,
    hyper: Option<HyperParams>,
}

#[derive(Debug, Parser)]
#[command(name = "bnmf", version, about = "Bayesian nonnegative matrix factorization by Gibbs sampling")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Debug, Subcommand)]
enum CliCommand {
    /// Fit one model; writes trace.csv, prediction.csv and manifest.toml.
    Fit(RunArgs),
    /// Train-MSE curves on all observed cells.
    Convergence(RunArgs),
    /// Held-out variance/MSE ratio across noise-to-signal ratios.
    Noise(RunArgs),
    /// Held-out MSE across fractions unobserved.
    Sparsity(RunArgs),
    /// Load and clean a dataset, then print its summary.
    ValidateData(RunArgs),
    /// Write a dataset drawn from exponential factors as 0-based triples.
    GenerateSynthetic(SynthArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model name; repeat the flag or separate with commas.
    #[arg(long = "model", value_delimiter = ',', value_parser = parse_model)]
    models: Vec<ModelKind>,
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    fraction: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    noise: Vec<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// u.data, ratings.dat or synthetic.
    #[arg(long, value_parser = parse_format)]
    format: Option<RatingsFormat>,
    /// 0 disables cleaning; defaults to 3 for rating files and 0 for synthetic.
    #[arg(long)]
    min_observed: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    rows: usize,
    #[arg(long, default_value_t = 40)]
    cols: usize,
    #[arg(long, default_value_t = 5)]
    k_true: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::from_str(s).map_err(|e| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<RatingsFormat, String> {
    RatingsFormat::from_str(s).map_err(|e| e.to_string())
}

fn default_min_observed(format: RatingsFormat) -> usize {
    match format {
        RatingsFormat::Synthetic => 0,
        RatingsFormat::UData | RatingsFormat::RatingsDat => 3,
    }
}

fn read_file_config(path: &Path) -> Result<FileConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: FileConfig =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::config(format!(
            "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            file.schema_version
        )));
    }
    Ok(file)
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn pick_list<T>(flag: Vec<T>, file: Option<Vec<T>>, default: Vec<T>) -> Vec<T> {
    if flag.is_empty() {
        file.unwrap_or(default)
    } else {
        flag
    }
}

fn resolve(command: Command, args: RunArgs) -> Result<CliConfig> {
    let file = args.config.as_deref().map(read_file_config).transpose()?;
    if let Some(c) = file.as_ref().and_then(|f| f.command) {
        if c != command {
            return Err(Error::config(format!("config file is for {c:?}, not {command:?}")));
        }
    }
    let (mut f, fd) = match file {
        Some(mut f) => {
            let d = f.dataset.take().unwrap_or_default();
            (Some(f), d)
        }
        None => (None, FileDataset::default()),
    };
    macro_rules! field {
        ($name:ident) => {
            f.as_mut().and_then(|f| f.$name.take())
        };
    }
    let path = args
        .dataset
        .or(fd.path)
        .ok_or_else(|| Error::config("no dataset given (--dataset or [dataset] path)"))?;
    let format = pick(args.format, fd.format, RatingsFormat::UData);
    let noise_default = if command == Command::Noise { NOISE_LADDER.to_vec() } else { Vec::new() };
    let config = CliConfig {
        schema_version: SCHEMA_VERSION,
        command,
        models: pick_list(args.models, field!(models), vec![ModelKind::Grrn]),
        k: pick_list(args.k, field!(k), vec![10]),
        fractions: pick_list(args.fraction, field!(fractions), Vec::new()),
        noise: pick_list(args.noise, field!(noise), noise_default),
        iterations: pick(args.iterations, field!(iterations), 500),
        burn_in: pick(args.burn_in, field!(burn_in), 400),
        repeats: pick(args.repeats, field!(repeats), 10),
        seed: pick(args.seed, field!(seed), 0),
        threads: pick(args.threads, field!(threads), 1),
        noise_holdout: field!(noise_holdout).unwrap_or(0.1),
        out: pick(args.out, field!(out), PathBuf::from("out")),
        dataset: DatasetConfig {
            path,
            format,
            min_observed: pick(args.min_observed, fd.min_observed, default_min_observed(format)),
        },
        hyper: field!(hyper).unwrap_or_default(),
    };
    validate(&config)?;
    Ok(config)
}

fn validate(config: &CliConfig) -> Result<()> {
    config.hyper.validate()?;
    if config.command == Command::ValidateData {
        return Ok(());
    }
    for &model in &config.models {
        for &k in &config.k {
            run_config(config, model, k).validate()?;
        }
    }
    match config.command.experiment() {
        None => {
            if config.models.len() != 1 || config.k.len() != 1 {
                return Err(Error::config("fit takes exactly one model and one K"));
            }
            match config.fractions.as_slice() {
                [] => Ok(()),
                [f] if *f > 0.0 && *f < 1.0 => Ok(()),
                [f] => Err(Error::config(format!("fraction unobserved must be in (0, 1), got {f}"))),
                _ => Err(Error::config("fit takes at most one fraction")),
            }
        }
        Some(kind) => experiment_spec(config, kind).validate(),
    }
}

fn run_config(config: &CliConfig, model: ModelKind, k: usize) -> RunConfig {
    RunConfig {
        kind: model,
        k,
        iterations: config.iterations,
        burn_in: config.burn_in,
        seed: config.seed,
        hyper: config.hyper,
    }
}

fn experiment_spec(config: &CliConfig, kind: ExperimentKind) -> ExperimentSpec {
    let levels = match kind {
        ExperimentKind::Convergence => Vec::new(),
        ExperimentKind::Noise => config.noise.clone(),
        ExperimentKind::Sparsity => config.fractions.clone(),
    };
    let base = run_config(config, config.models[0], config.k[0]);
    let mut spec = ExperimentSpec::new(kind, config.models.clone(), config.k.clone(), levels, base);
    spec.repeats = config.repeats;
    spec.noise_holdout = config.noise_holdout;
    spec.threads = Some(config.threads);
    spec
}

/// Loaded dataset with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    /// Absolute path.
    pub path: PathBuf,
    pub format: RatingsFormat,
    pub sha256: String,
    pub min_observed: usize,
    pub rows: usize,
    pub cols: usize,
    pub observed: usize,
    pub density: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Reads, checksums, parses and cleans the configured dataset.
pub fn load_dataset(config: &DatasetConfig) -> Result<(ObservedMatrix, DatasetSummary)> {
    let bytes = fs::read(&config.path).map_err(|e| Error::io(&config.path, e))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: config.path.clone(),
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })?;
    let mut data = parse_ratings(&text, config.format, &config.path)?;
    if config.min_observed > 0 {
        data = clean_min_observed(&data, config.min_observed)?;
    }
    let summary = DatasetSummary {
        path: fs::canonicalize(&config.path).map_err(|e| Error::io(&config.path, e))?,
        format: config.format,
        sha256,
        min_observed: config.min_observed,
        rows: data.n_rows(),
        cols: data.n_cols(),
        observed: data.observed_count(),
        density: data.density(),
        mean: data.observed_mean()?,
        variance: data.observed_variance()?,
    };
    Ok((data, summary))
}

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

fn fmt_opt_u64(x: Option<u64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn parse_field<T: FromStr>(record: &csv::StringRecord, i: usize, path: &Path, line: usize) -> Result<T> {
    let raw = record.get(i).unwrap_or("");
    raw.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("cannot parse field {i} ({raw:?})"),
    })
}

fn parse_opt<T: FromStr>(record: &csv::StringRecord, i: usize, path: &Path, line: usize) -> Result<Option<T>> {
    match record.get(i) {
        None | Some("") => Ok(None),
        Some(_) => parse_field(record, i, path, line).map(Some),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let found = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("unexpected header {:?}", found.iter().collect::<Vec<_>>()),
        });
    }
    r.records()
        .enumerate()
        .map(|(i, rec)| rec.map(|rec| (i + 2, rec)).map_err(|e| csv_error(path, e)))
        .collect()
}

/// Writes `iteration,train_mse,test_mse,sigma2`, iterations counted from 1.
pub fn write_trace(trace: &RunTrace, path: &Path) -> Result<()> {
    let rows = (0..trace.train_mse.len()).map(|i| {
        vec![
            (i + 1).to_string(),
            fmt_f64(trace.train_mse[i]),
            fmt_opt(trace.test_mse.as_ref().map(|t| t[i])),
            fmt_f64(trace.sigma2[i]),
        ]
    });
    write_table(path, &TRACE_HEADER, rows)
}

/// Per-iteration columns of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceColumns {
    pub train_mse: Vec<f64>,
    pub test_mse: Option<Vec<f64>>,
    pub sigma2: Vec<f64>,
}

pub fn read_trace(path: &Path) -> Result<TraceColumns> {
    let mut out = TraceColumns {
        train_mse: Vec::new(),
        test_mse: Some(Vec::new()),
        sigma2: Vec::new(),
    };
    for (line, rec) in read_table(path, &TRACE_HEADER)? {
        out.train_mse.push(parse_field(&rec, 1, path, line)?);
        match parse_opt::<f64>(&rec, 2, path, line)? {
            Some(v) => out.test_mse.as_mut().map(|t| t.push(v)),
            None => out.test_mse.take().map(|_| ()),
        };
        out.sigma2.push(parse_field(&rec, 3, path, line)?);
    }
    Ok(out)
}

/// Writes every cell of the prediction as `row,col,observed,prediction`.
pub fn write_prediction(prediction: &Array2<f64>, train: &ObservedMatrix, path: &Path) -> Result<()> {
    let rows = prediction
        .indexed_iter()
        .map(|((i, j), &v)| vec![i.to_string(), j.to_string(), u8::from(train.is_observed(i, j)).to_string(), fmt_f64(v)]);
    write_table(path, &PREDICTION_HEADER, rows)
}

pub fn read_prediction(path: &Path) -> Result<Array2<f64>> {
    let mut cells = Vec::new();
    let (mut m, mut n) = (0, 0);
    for (line, rec) in read_table(path, &PREDICTION_HEADER)? {
        let i: usize = parse_field(&rec, 0, path, line)?;
        let j: usize = parse_field(&rec, 1, path, line)?;
        m = m.max(i + 1);
        n = n.max(j + 1);
        cells.push((i, j, parse_field::<f64>(&rec, 3, path, line)?));
    }
    let mut out = Array2::from_elem((m, n), f64::NAN);
    for (i, j, v) in cells {
        out[[i, j]] = v;
    }
    Ok(out)
}

fn level_field(level: Option<f64>) -> String {
    fmt_opt(level)
}

pub fn write_results(cells: &[CellResult], path: &Path) -> Result<()> {
    let rows = cells.iter().map(|c| {
        vec![
            c.experiment.name().to_string(),
            c.model.to_string(),
            c.k.to_string(),
            level_field(c.level),
            c.repeat.to_string(),
            c.seed.to_string(),
            fmt_opt_u64(c.split_seed),
            fmt_opt_u64(c.noise_seed),
            fmt_opt(c.train_mse_mean_of_samples),
            fmt_opt(c.train_mse_of_posterior_mean),
            fmt_opt(c.test_mse_mean_of_samples),
            fmt_opt(c.test_mse_of_posterior_mean),
            fmt_opt(c.variance_ratio),
            fmt_opt(c.variance_ratio_clean),
            c.diverged.to_string(),
            c.gee_clamps.to_string(),
            c.error.clone().unwrap_or_default(),
        ]
    });
    write_table(path, &RESULTS_HEADER, rows)
}

fn parse_experiment(s: &str, path: &Path, line: usize) -> Result<ExperimentKind> {
    match s {
        "convergence" => Ok(ExperimentKind::Convergence),
        "noise" => Ok(ExperimentKind::Noise),
        "sparsity" => Ok(ExperimentKind::Sparsity),
        other => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("unknown experiment {other:?}"),
        }),
    }
}

/// Reads `results.csv` back. Curves and wall times live in other files and
/// come back as `None` and 0.
pub fn read_results(path: &Path) -> Result<Vec<CellResult>> {
    read_table(path, &RESULTS_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            let model = ModelKind::from_str(&r[1]).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: e.to_string(),
            })?;
            Ok(CellResult {
                experiment: parse_experiment(&r[0], path, line)?,
                model,
                k: parse_field(&r, 2, path, line)?,
                level: parse_opt(&r, 3, path, line)?,
                repeat: parse_field(&r, 4, path, line)?,
                seed: parse_field(&r, 5, path, line)?,
                split_seed: parse_opt(&r, 6, path, line)?,
                noise_seed: parse_opt(&r, 7, path, line)?,
                train_mse_mean_of_samples: parse_opt(&r, 8, path, line)?,
                train_mse_of_posterior_mean: parse_opt(&r, 9, path, line)?,
                test_mse_mean_of_samples: parse_opt(&r, 10, path, line)?,
                test_mse_of_posterior_mean: parse_opt(&r, 11, path, line)?,
                variance_ratio: parse_opt(&r, 12, path, line)?,
                variance_ratio_clean: parse_opt(&r, 13, path, line)?,
                diverged: parse_field(&r, 14, path, line)?,
                gee_clamps: parse_field(&r, 15, path, line)?,
                error: Some(r[16].to_string()).filter(|s| !s.is_empty()),
                curve: None,
                wall_seconds: 0.0,
            })
        })
        .collect()
}

fn stat_fields(s: Option<Stat>) -> [String; 2] {
    [fmt_opt(s.map(|s| s.mean)), fmt_opt(s.map(|s| s.std))]
}

pub fn write_aggregate(aggregates: &[Aggregate], path: &Path) -> Result<()> {
    let rows = aggregates.iter().map(|a| {
        let mut row = vec![
            a.experiment.name().to_string(),
            a.model.to_string(),
            a.k.to_string(),
            level_field(a.level),
            a.repeats.to_string(),
            a.completed.to_string(),
            a.diverged.to_string(),
        ];
        for s in [a.train_mse_mean_of_samples, a.test_mse_of_posterior_mean, a.variance_ratio, a.variance_ratio_clean] {
            row.extend(stat_fields(s));
        }
        row
    });
    write_table(path, &AGGREGATE_HEADER, rows)
}

pub fn read_aggregate(path: &Path) -> Result<Vec<Aggregate>> {
    read_table(path, &AGGREGATE_HEADER)?
        .into_iter()
        .map(|(line, r)| {
            let stat = |i: usize| -> Result<Option<Stat>> {
                let mean: Option<f64> = parse_opt(&r, i, path, line)?;
                let std: Option<f64> = parse_opt(&r, i + 1, path, line)?;
                Ok(mean.zip(std).map(|(mean, std)| Stat { mean, std }))
            };
            Ok(Aggregate {
                experiment: parse_experiment(&r[0], path, line)?,
                model: ModelKind::from_str(&r[1]).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: e.to_string(),
                })?,
                k: parse_field(&r, 2, path, line)?,
                level: parse_opt(&r, 3, path, line)?,
                repeats: parse_field(&r, 4, path, line)?,
                completed: parse_field(&r, 5, path, line)?,
                diverged: parse_field(&r, 6, path, line)?,
                train_mse_mean_of_samples: stat(7)?,
                test_mse_of_posterior_mean: stat(9)?,
                variance_ratio: stat(11)?,
                variance_ratio_clean: stat(13)?,
            })
        })
        .collect()
}

fn write_timings(cells: &[CellResult], path: &Path) -> Result<()> {
    let rows = cells.iter().map(|c| {
        vec![
            c.experiment.name().to_string(),
            c.model.to_string(),
            c.k.to_string(),
            level_field(c.level),
            c.repeat.to_string(),
            fmt_f64(c.wall_seconds),
        ]
    });
    write_table(path, &TIMINGS_HEADER, rows)
}

/// One file per (model, K): the mean and spread over repeats, then each repeat.
fn write_curve(curve: &Curve, cells: &[CellResult], path: &Path) -> Result<()> {
    let runs: Vec<&Vec<f64>> = cells
        .iter()
        .filter(|c| c.model == curve.model && c.k == curve.k)
        .filter_map(|c| c.curve.as_ref())
        .collect();
    let mut header = vec!["iteration".to_string(), "mean_train_mse".into(), "std_train_mse".into()];
    header.extend((0..runs.len()).map(|r| format!("repeat_{r}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..curve.mean.len()).map(|i| {
        let mut row = vec![(i + 1).to_string(), fmt_f64(curve.mean[i]), fmt_f64(curve.std[i])];
        row.extend(runs.iter().map(|r| fmt_f64(r[i])));
        row
    });
    write_table(path, &header, rows)
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::config(format!("cannot serialize {}: {e}", path.display())))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Serialize)]
struct FitSummary {
    model: ModelKind,
    k: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    split_seed: Option<u64>,
    train_observed: usize,
    test_observed: usize,
    retained_samples: usize,
    /// Numeric `beta_lambda` used by the run.
    beta_lambda: f64,
    train_mse_mean_of_samples: f64,
    train_mse_of_posterior_mean: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_mse_mean_of_samples: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_mse_of_posterior_mean: Option<f64>,
    gee_clamps: u64,
}

#[derive(Debug, Serialize)]
struct FitManifest<'a> {
    schema_version: u32,
    version: &'static str,
    wall_seconds: f64,
    run: FitSummary,
    /// Hyperparameters with `beta_lambda` pinned.
    resolved_hyper: HyperParams,
    dataset: &'a DatasetSummary,
    config: &'a CliConfig,
}

#[derive(Debug, Serialize)]
struct ExperimentManifest<'a> {
    schema_version: u32,
    version: &'static str,
    wall_seconds: f64,
    cells: usize,
    failed_cells: usize,
    diverged_cells: usize,
    dataset: &'a DatasetSummary,
    config: &'a CliConfig,
}

fn cmd_fit(config: &CliConfig, data: &ObservedMatrix, summary: &DatasetSummary) -> Result<i32> {
    let start = Instant::now();
    let rc = run_config(config, config.models[0], config.k[0]);
    let (train, test, split_seed) = match config.fractions.first() {
        Some(&f) => {
            let spec = SplitSpec {
                fraction_unobserved: f,
                seed: config.seed,
            };
            let (train, test) = split_train_test(data, &spec)?;
            (train, Some(test), Some(spec.seed))
        }
        None => (data.clone(), None, None),
    };
    let trace = run_model(&rc, &train, test.as_ref())?;
    let wall_seconds = start.elapsed().as_secs_f64();

    let manifest = FitManifest {
        schema_version: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION"),
        wall_seconds,
        run: FitSummary {
            model: trace.kind,
            k: trace.k,
            seed: trace.seed,
            split_seed,
            train_observed: train.observed_count(),
            test_observed: test.as_ref().map_or(0, |t| t.observed_count()),
            retained_samples: trace.retained_samples,
            beta_lambda: trace.hyper.beta_lambda_value()?,
            train_mse_mean_of_samples: trace.train_mse_mean_of_samples,
            train_mse_of_posterior_mean: trace.train_mse_of_posterior_mean,
            test_mse_mean_of_samples: trace.test_mse_mean_of_samples,
            test_mse_of_posterior_mean: trace.test_mse_of_posterior_mean,
            gee_clamps: trace.gee_clamps,
        },
        resolved_hyper: trace.hyper,
        dataset: summary,
        config,
    };
    create_out_dir(&config.out)?;
    write_trace(&trace, &config.out.join("trace.csv"))?;
    write_prediction(&trace.posterior_mean, &train, &config.out.join("prediction.csv"))?;
    write_toml(&manifest, &config.out.join("manifest.toml"))?;
    write_toml(config, &config.out.join("config.toml"))?;
    println!(
        "{} K={}: train MSE {:.6}{}",
        trace.kind,
        trace.k,
        trace.train_mse_mean_of_samples,
        trace
            .test_mse_of_posterior_mean
            .map(|t| format!(", held-out MSE {t:.6}"))
            .unwrap_or_default()
    );
    Ok(0)
}

/// Writes the tables of an experiment into `dir`.
pub fn write_experiment(result: &ExperimentResult, dir: &Path) -> Result<()> {
    create_out_dir(dir)?;
    write_results(&result.cells, &dir.join("results.csv"))?;
    write_aggregate(&result.aggregates, &dir.join("aggregate.csv"))?;
    write_timings(&result.cells, &dir.join("timings.csv"))?;
    if !result.curves.is_empty() {
        let curves = dir.join("curves");
        create_out_dir(&curves)?;
        for c in &result.curves {
            write_curve(c, &result.cells, &curves.join(format!("{}_K{}.csv", c.model, c.k)))?;
        }
    }
    Ok(())
}

fn cmd_experiment(config: &CliConfig, kind: ExperimentKind, data: &ObservedMatrix, summary: &DatasetSummary) -> Result<i32> {
    let start = Instant::now();
    let result = run_experiment(&experiment_spec(config, kind), data)?;
    let failed = result.failures().count();
    write_experiment(&result, &config.out)?;
    let manifest = ExperimentManifest {
        schema_version: SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION"),
        wall_seconds: start.elapsed().as_secs_f64(),
        cells: result.cells.len(),
        failed_cells: failed,
        diverged_cells: result.cells.iter().filter(|c| c.diverged).count(),
        dataset: summary,
        config,
    };
    write_toml(&manifest, &config.out.join("manifest.toml"))?;
    write_toml(config, &config.out.join("config.toml"))?;
    for c in result.failures() {
        eprintln!(
            "{} K={} level={} repeat={}: {}",
            c.model,
            c.k,
            level_field(c.level),
            c.repeat,
            c.error.as_deref().unwrap_or("")
        );
    }
    println!("{} cells written to {} ({failed} failed)", result.cells.len(), config.out.display());
    Ok(if failed > 0 { 4 } else { 0 })
}

fn cmd_validate(summary: &DatasetSummary) -> Result<i32> {
    let text = toml::to_string(summary).map_err(|e| Error::config(e.to_string()))?;
    print!("{text}");
    Ok(0)
}

fn cmd_generate(args: &SynthArgs) -> Result<i32> {
    if args.rows == 0 || args.cols == 0 || args.k_true == 0 {
        return Err(Error::config("rows, cols and k-true must be at least 1"));
    }
    if !(args.noise_sd >= 0.0 && args.noise_sd.is_finite()) {
        return Err(Error::config(format!("noise-sd must be >= 0, got {}", args.noise_sd)));
    }
    let (data, _, _) = synthetic_generate(args.rows, args.cols, args.k_true, args.noise_sd, args.seed)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_out_dir(dir)?;
    }
    write_triples(&data, &args.out)?;
    Ok(0)
}

fn execute(command: CliCommand) -> Result<i32> {
    let (command, args) = match command {
        CliCommand::GenerateSynthetic(a) => return cmd_generate(&a),
        CliCommand::Fit(a) => (Command::Fit, a),
        CliCommand::Convergence(a) => (Command::Convergence, a),
        CliCommand::Noise(a) => (Command::Noise, a),
        CliCommand::Sparsity(a) => (Command::Sparsity, a),
        CliCommand::ValidateData(a) => (Command::ValidateData, a),
    };
    let config = resolve(command, args)?;
    let (data, summary) = load_dataset(&config.dataset)?;
    log::info!(
        "{}: {}x{} with {} observed",
        summary.path.display(),
        summary.rows,
        summary.cols,
        summary.observed
    );
    match command.experiment() {
        Some(kind) => cmd_experiment(&config, kind, &data, &summary),
        None if command == Command::Fit => cmd_fit(&config, &data, &summary),
        None => cmd_validate(&summary),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code: 0 success, 2 configuration or validation, 3 I/O or parse, 4 numerical
/// failure.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
