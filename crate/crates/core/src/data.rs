//! Rating files, cleaning, splitting, noise injection and synthetic data.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ObservedMatrix;

/// Record layout of a ratings file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatingsFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp`.
    #[serde(rename = "u.data")]
    UData,
    /// `user::item::rating::timestamp`.
    #[serde(rename = "ratings.dat")]
    RatingsDat,
    /// `row<TAB>col<TAB>value`, 0-based or not, any real value.
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl RatingsFormat {
    pub fn name(&self) -> &'static str {
        match self {
            RatingsFormat::UData => "u.data",
            RatingsFormat::RatingsDat => "ratings.dat",
            RatingsFormat::Synthetic => "synthetic",
        }
    }

    fn separator(&self) -> &'static str {
        match self {
            RatingsFormat::RatingsDat => "::",
            _ => "\t",
        }
    }
}

impl fmt::Display for RatingsFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RatingsFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u.data" | "udata" => Ok(RatingsFormat::UData),
            "ratings.dat" | "ratingsdat" => Ok(RatingsFormat::RatingsDat),
            "synthetic" => Ok(RatingsFormat::Synthetic),
            _ => Err(Error::config(format!(
                "unknown format {s:?}; expected u.data, ratings.dat or synthetic"
            ))),
        }
    }
}

/// A ratings file on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingsFile {
    pub path: PathBuf,
    pub format: RatingsFormat,
}

impl RatingsFile {
    pub fn new(path: impl Into<PathBuf>, format: RatingsFormat) -> Self {
        Self {
            path: path.into(),
            format,
        }
    }
}

/// Reads a ratings file. See [`parse_ratings`].
pub fn load_ratings(file: &RatingsFile) -> Result<ObservedMatrix> {
    let text = fs::read_to_string(&file.path).map_err(|e| Error::io(&file.path, e))?;
    parse_ratings(&text, file.format, &file.path)
}

/// Parses ratings text into a matrix with one row per distinct user and one
/// column per distinct item, both in ascending id order.
///
/// Blank lines are skipped. A repeated `(user, item)` pair keeps its last
/// value. Ratings must lie in `[1, 5]` except in the synthetic format.
pub fn parse_ratings(text: &str, format: RatingsFormat, path: &Path) -> Result<ObservedMatrix> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut triples: Vec<(u64, u64, f64)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.separator()).collect();
        let expected = if format == RatingsFormat::Synthetic { 3 } else { 4 };
        if fields.len() != expected {
            return Err(parse_err(
                line_no,
                format!("expected {expected} fields, found {}", fields.len()),
            ));
        }
        let user: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad user id {:?}", fields[0])))?;
        let item: u64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad item id {:?}", fields[1])))?;
        let value: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad rating {:?}", fields[2])))?;
        if !value.is_finite() {
            return Err(parse_err(line_no, format!("non-finite value {value}")));
        }
        if format != RatingsFormat::Synthetic {
            if user == 0 || item == 0 {
                return Err(parse_err(line_no, "ids must be positive".into()));
            }
            if !(1.0..=5.0).contains(&value) {
                return Err(parse_err(line_no, format!("rating {value} outside [1, 5]")));
            }
        }
        triples.push((user, item, value));
    }
    if triples.is_empty() {
        return Err(Error::domain(format!("{}: no ratings", path.display())));
    }

    let dense = |ids: &mut dyn Iterator<Item = u64>| -> BTreeMap<u64, usize> {
        let mut map: BTreeMap<u64, usize> = ids.map(|id| (id, 0)).collect();
        for (i, v) in map.values_mut().enumerate() {
            *v = i;
        }
        map
    };
    let rows = dense(&mut triples.iter().map(|t| t.0));
    let cols = dense(&mut triples.iter().map(|t| t.1));
    ObservedMatrix::from_triples(
        rows.len(),
        cols.len(),
        triples.iter().map(|&(u, i, v)| (rows[&u], cols[&i], v)),
    )
}

/// Writes the observed cells as 0-based `row<TAB>col<TAB>value` lines.
pub fn write_triples(data: &ObservedMatrix, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(data.observed_count() * 16);
    for (i, j, v) in data.observed() {
        out.push_str(&format!("{i}\t{j}\t{v}\n"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Keeps only the listed rows and columns, in order.
fn submatrix(data: &ObservedMatrix, rows: &[usize], cols: &[usize]) -> Result<ObservedMatrix> {
    let values = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| data.values()[[rows[i], cols[j]]]);
    let mask = Array2::from_shape_fn((rows.len(), cols.len()), |(i, j)| data.mask()[[rows[i], cols[j]]]);
    ObservedMatrix::new(values, mask)
}

/// Repeatedly drops rows, then columns, with fewer than `min_count` observed
/// cells until every remaining row and column has at least that many.
pub fn clean_min_observed(data: &ObservedMatrix, min_count: usize) -> Result<ObservedMatrix> {
    if min_count == 0 {
        return Err(Error::config("min_count must be at least 1"));
    }
    let mask = data.mask();
    let mut rows: Vec<usize> = (0..data.n_rows()).collect();
    let mut cols: Vec<usize> = (0..data.n_cols()).collect();
    loop {
        let kept_rows: Vec<usize> = rows
            .iter()
            .copied()
            .filter(|&i| cols.iter().filter(|&&j| mask[[i, j]]).count() >= min_count)
            .collect();
        let kept_cols: Vec<usize> = cols
            .iter()
            .copied()
            .filter(|&j| kept_rows.iter().filter(|&&i| mask[[i, j]]).count() >= min_count)
            .collect();
        let stable = kept_rows.len() == rows.len() && kept_cols.len() == cols.len();
        rows = kept_rows;
        cols = kept_cols;
        if stable {
            break;
        }
    }
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::domain(format!(
            "no rows or columns have {min_count} observed entries"
        )));
    }
    submatrix(data, &rows, &cols)
}

/// Target sparsity of a train/test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of the full `M x N` grid that is unobserved in the training set.
    pub fraction_unobserved: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// Training-set size on `data`. Fractions below the data's own sparsity
    /// keep every observed cell.
    pub fn train_count(&self, data: &ObservedMatrix) -> Result<usize> {
        let f = self.fraction_unobserved;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config(format!(
                "fraction unobserved must be in (0, 1), got {f}"
            )));
        }
        let grid = (data.n_rows() * data.n_cols()) as f64;
        let n = ((1.0 - f) * grid).round() as usize;
        let n = n.min(data.observed_count());
        if n == 0 {
            return Err(Error::domain(format!(
                "fraction {f} leaves no training entries"
            )));
        }
        Ok(n)
    }
}

/// Splits observed cells into train and test so that the training matrix has
/// the requested fraction of its grid unobserved.
pub fn split_train_test(data: &ObservedMatrix, spec: &SplitSpec) -> Result<(ObservedMatrix, ObservedMatrix)> {
    let n_train = spec.train_count(data)?;
    split_by_count(data, n_train, spec.seed)
}

/// Puts a uniformly random `n_train` of the observed cells in train and the
/// rest in test.
pub fn split_by_count(data: &ObservedMatrix, n_train: usize, seed: u64) -> Result<(ObservedMatrix, ObservedMatrix)> {
    if n_train > data.observed_count() {
        return Err(Error::domain(format!(
            "cannot put {n_train} of {} observed cells in train",
            data.observed_count()
        )));
    }
    let mut cells: Vec<(usize, usize)> = data.observed().map(|(i, j, _)| (i, j)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cells.shuffle(&mut rng);
    let mut train_mask = Array2::from_elem(data.mask().dim(), false);
    for &(i, j) in &cells[..n_train] {
        train_mask[[i, j]] = true;
    }
    let mut test_mask = Array2::from_elem(data.mask().dim(), false);
    for &(i, j) in &cells[n_train..] {
        test_mask[[i, j]] = true;
    }
    Ok((data.with_mask(train_mask)?, data.with_mask(test_mask)?))
}

/// Adds `N(0, ratio * var)` noise to every observed cell, where `var` is the
/// population variance of the observed values. Values are not clipped.
pub fn add_noise(data: &ObservedMatrix, noise_to_signal: f64, seed: u64) -> Result<ObservedMatrix> {
    if !(noise_to_signal >= 0.0 && noise_to_signal.is_finite()) {
        return Err(Error::domain(format!(
            "noise-to-signal ratio must be >= 0, got {noise_to_signal}"
        )));
    }
    if noise_to_signal == 0.0 || data.observed_count() == 0 {
        return Ok(data.clone());
    }
    let sd = (noise_to_signal * data.observed_variance()?).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.clone();
    let mask = data.mask().clone();
    for (v, &m) in out.values_mut().iter_mut().zip(mask.iter()) {
        if m {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sd * e;
        }
    }
    Ok(out)
}

/// Fully observed `A = WZ + noise` with `W`, `Z` drawn i.i.d. from `Exp(1)`.
pub fn synthetic_generate(
    m: usize,
    n: usize,
    k_true: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<(ObservedMatrix, Array2<f64>, Array2<f64>)> {
    if m == 0 || n == 0 || k_true == 0 {
        return Err(Error::domain("synthetic dimensions must be at least 1"));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::domain(format!("noise sd must be >= 0, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_simple_fn((m, k_true), || Exp1.sample(&mut rng));
    let z = Array2::from_shape_simple_fn((k_true, n), || Exp1.sample(&mut rng));
    let mut a = w.dot(&z);
    if noise_sd > 0.0 {
        for v in a.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += noise_sd * e;
        }
    }
    Ok((ObservedMatrix::fully_observed(a), w, z))
}
