//! Right-censored survival datasets: CSV ingestion, preprocessing, fold plans.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Columns with at most this many distinct raw values are treated as
/// categorical when no metadata says otherwise (mode imputation).
pub const CATEGORICAL_MAX_LEVELS: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("cannot parse value at row {row}, column `{col}`")]
    ParseError { row: usize, col: String },
    #[error("non-positive or non-finite time at row {0}")]
    NonPositiveTime(usize),
    #[error("event flag at row {0} is not 0 or 1")]
    BadEventFlag(usize),
    #[error("column `{0}` has no observed values")]
    AllMissingColumn(String),
    #[error("need 2 <= k <= N for k-fold (k={k}, N={n})")]
    TooFewRows { k: usize, n: usize },
    #[error("dataset has no rows")]
    Empty,
    #[error("dataset has no feature columns")]
    NoFeatures,
    #[error("feature columns do not match: expected {expected:?}, got {actual:?}")]
    SchemaMismatch {
        expected: Vec<String>,
        actual: Vec<String>,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A right-censored survival dataset. Features are stored row-major; a
/// missing cell is `NaN` until [`preprocess`] imputes it.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    n: usize,
    p: usize,
    features: Vec<f64>,
    times: Vec<f64>,
    events: Vec<u8>,
    group: Option<Vec<u8>>,
    feature_names: Vec<String>,
}

impl SurvivalDataset {
    /// Builds a dataset from row-major features, validating the invariants
    /// on times and events.
    pub fn new(
        features: Vec<f64>,
        p: usize,
        times: Vec<f64>,
        events: Vec<u8>,
        group: Option<Vec<u8>>,
        feature_names: Option<Vec<String>>,
    ) -> Result<Self, DataError> {
        let n = times.len();
        if n == 0 {
            return Err(DataError::Empty);
        }
        if p == 0 {
            return Err(DataError::NoFeatures);
        }
        assert_eq!(features.len(), n * p, "feature matrix must be N x p");
        assert_eq!(events.len(), n, "events must have length N");
        if let Some(g) = &group {
            assert_eq!(g.len(), n, "group must have length N");
            if let Some(i) = g.iter().position(|&v| v > 1) {
                return Err(DataError::ParseError {
                    row: i + 1,
                    col: "group".into(),
                });
            }
        }
        if let Some(i) = times.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(DataError::NonPositiveTime(i + 1));
        }
        if let Some(i) = events.iter().position(|&c| c > 1) {
            return Err(DataError::BadEventFlag(i + 1));
        }
        let feature_names =
            feature_names.unwrap_or_else(|| (1..=p).map(|j| format!("x{j}")).collect());
        assert_eq!(feature_names.len(), p);
        Ok(Self {
            n,
            p,
            features,
            times,
            events,
            group,
            feature_names,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.p..(i + 1) * self.p]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[u8] {
        &self.events
    }

    pub fn group(&self) -> Option<&[u8]> {
        self.group.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn has_missing(&self) -> bool {
        self.features.iter().any(|v| v.is_nan())
    }

    /// Rows selected by `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> SurvivalDataset {
        let mut features = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        SurvivalDataset {
            n: idx.len(),
            p: self.p,
            features,
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
            group: self
                .group
                .as_ref()
                .map(|g| idx.iter().map(|&i| g[i]).collect()),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Same rows with every time divided by `scale`.
    pub fn with_time_scale(&self, scale: f64) -> SurvivalDataset {
        let mut out = self.clone();
        for t in &mut out.times {
            *t /= scale;
        }
        out
    }

    /// Raw little-endian bytes of features, times and events; used for
    /// dataset fingerprints.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(8 * (self.features.len() + self.n) + self.n);
        for v in &self.features {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.times {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&self.events);
        bytes
    }
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

fn parse_flag(cell: &str) -> Option<u8> {
    let v: f64 = cell.trim().parse().ok()?;
    if v == 0.0 {
        Some(0)
    } else if v == 1.0 {
        Some(1)
    } else {
        None
    }
}

/// Reads a CSV with a header row. Every column other than the time, event
/// and group columns becomes a feature.
pub fn load_csv(
    path: impl AsRef<Path>,
    time_col: &str,
    event_col: &str,
    group_col: Option<&str>,
) -> Result<SurvivalDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, time_col, event_col, group_col)
}

pub fn read_csv<R: Read>(
    reader: R,
    time_col: &str,
    event_col: &str,
    group_col: Option<&str>,
) -> Result<SurvivalDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let t_idx = find(time_col)?;
    let c_idx = find(event_col)?;
    let g_idx = group_col.map(find).transpose()?;
    let feat_idx: Vec<usize> = (0..headers.len())
        .filter(|&j| j != t_idx && j != c_idx && Some(j) != g_idx)
        .collect();
    let feature_names: Vec<String> = feat_idx.iter().map(|&j| headers[j].clone()).collect();

    let mut features = Vec::new();
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut group = g_idx.map(|_| Vec::new());
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |j: usize| record.get(j).unwrap_or("");
        let perr = |j: usize| DataError::ParseError {
            row,
            col: headers[j].clone(),
        };
        let t: f64 = cell(t_idx).trim().parse().map_err(|_| perr(t_idx))?;
        if !(t.is_finite() && t > 0.0) {
            return Err(DataError::NonPositiveTime(row));
        }
        let c = parse_flag(cell(c_idx)).ok_or(DataError::BadEventFlag(row))?;
        if let (Some(gi), Some(g)) = (g_idx, group.as_mut()) {
            g.push(parse_flag(cell(gi)).ok_or_else(|| perr(gi))?);
        }
        for &j in &feat_idx {
            let raw = cell(j);
            let v = if is_missing(raw) {
                f64::NAN
            } else {
                raw.trim().parse::<f64>().map_err(|_| perr(j))?
            };
            features.push(v);
        }
        times.push(t);
        events.push(c);
    }
    SurvivalDataset::new(
        features,
        feat_idx.len(),
        times,
        events,
        group,
        Some(feature_names),
    )
}

/// Imputation and min-max statistics fitted on a training set and reused on
/// held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Value substituted for missing cells (mean, or mode for categorical).
    pub fill: Vec<f64>,
}

impl Scaler {
    /// Fits imputation and scaling statistics. `categorical` overrides the
    /// distinct-level heuristic per column.
    pub fn fit(ds: &SurvivalDataset, categorical: Option<&[bool]>) -> Result<Self, DataError> {
        let p = ds.p();
        let mut min = vec![0.0; p];
        let mut max = vec![0.0; p];
        let mut fill = vec![0.0; p];
        for j in 0..p {
            let col: Vec<f64> = (0..ds.n())
                .map(|i| ds.row(i)[j])
                .filter(|v| !v.is_nan())
                .collect();
            if col.is_empty() {
                return Err(DataError::AllMissingColumn(ds.feature_names()[j].clone()));
            }
            let is_cat = match categorical {
                Some(c) => c[j],
                None => distinct_levels(&col) <= CATEGORICAL_MAX_LEVELS,
            };
            fill[j] = if is_cat {
                mode(&col)
            } else {
                col.iter().sum::<f64>() / col.len() as f64
            };
            min[j] = col.iter().copied().fold(f64::INFINITY, f64::min);
            max[j] = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        Ok(Self { min, max, fill })
    }

    /// Imputes and scales; values outside the fitted range are not clipped.
    pub fn transform(&self, ds: &SurvivalDataset) -> Result<SurvivalDataset, DataError> {
        if ds.p() != self.min.len() {
            return Err(DataError::SchemaMismatch {
                expected: vec![format!("{} features", self.min.len())],
                actual: ds.feature_names().to_vec(),
            });
        }
        let p = ds.p();
        let mut features = ds.features().to_vec();
        for (k, v) in features.iter_mut().enumerate() {
            let j = k % p;
            let raw = if v.is_nan() { self.fill[j] } else { *v };
            let range = self.max[j] - self.min[j];
            *v = if range > 0.0 {
                (raw - self.min[j]) / range
            } else {
                0.0
            };
        }
        let mut out = ds.clone();
        out.features = features;
        Ok(out)
    }
}

fn distinct_levels(col: &[f64]) -> usize {
    let mut v = col.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

/// Most frequent value; ties go to the smallest value.
fn mode(col: &[f64]) -> f64 {
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for v in col {
        *counts.entry(v.to_bits()).or_default() += 1;
    }
    let mut best = (0usize, f64::INFINITY);
    for (bits, c) in counts {
        let v = f64::from_bits(bits);
        if c > best.0 || (c == best.0 && v < best.1) {
            best = (c, v);
        }
    }
    best.1
}

/// Mean/mode imputation followed by per-column min-max scaling to [0, 1].
pub fn preprocess(raw: &SurvivalDataset) -> Result<(SurvivalDataset, Scaler), DataError> {
    let scaler = Scaler::fit(raw, None)?;
    let ds = scaler.transform(raw)?;
    Ok((ds, scaler))
}

/// Assignment of rows to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    /// Shuffled, near-equal folds: sizes differ by at most one.
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self, DataError> {
        if k < 2 || k > n {
            return Err(DataError::TooFewRows { k, n });
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignments = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            assignments[i] = pos % k;
        }
        Ok(Self {
            seed,
            k,
            assignments,
        })
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// (train indices, test indices) for `fold`, both ascending.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..self.assignments.len()).partition(|&i| self.assignments[i] == fold);
        (train, test)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fold plan serializes")
    }
}

pub fn kfold(ds: &SurvivalDataset, k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    FoldPlan::new(ds.n(), k, seed)
}
