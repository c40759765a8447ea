//! Dataset loading, partitioning and standardization.
//!
//! Partitions are contiguous slices of a seeded permutation, so a (scheme,
//! seed, n) triple fully determines every split. Standardization statistics
//! are always fitted on the training partition alone and applied everywhere
//! else, targets included.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A fully numeric regression table.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.x.cols()
    }

    /// Copies the given rows into a new design matrix and target vector.
    pub fn select(&self, rows: &[usize]) -> (Matrix, Vec<f64>) {
        let x = Matrix::from_fn(rows.len(), self.x.cols(), |i, j| self.x.get(rows[i], j));
        let y = rows.iter().map(|&i| self.y[i]).collect();
        (x, y)
    }

    /// Returns a standardized copy plus the fitted transform. Statistics
    /// come from `train_rows` only.
    pub fn standardize(&self, train_rows: &[usize]) -> Result<(Dataset, Standardization)> {
        let std = Standardization::fit(&self.x, &self.y, train_rows)?;
        let x = std.apply(&self.x)?;
        let y = std.apply_targets(&self.y);
        Ok((
            Dataset {
                x,
                y,
                feature_names: self.feature_names.clone(),
                target_name: self.target_name.clone(),
            },
            std,
        ))
    }
}

/// How the examples are divided among the partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// 40% train, 20% calibration, 20% validation, 20% test. For methods
    /// that calibrate on held-out data.
    IcpFamily,
    /// 60% train, 20% validation, 20% test, no calibration partition. For
    /// methods whose bounds come straight from the network.
    QdSoft,
}

impl SplitScheme {
    /// Calibration, validation and test fractions; train takes the rest.
    fn held_out_fractions(self) -> (f64, f64, f64) {
        match self {
            SplitScheme::IcpFamily => (0.2, 0.2, 0.2),
            SplitScheme::QdSoft => (0.0, 0.2, 0.2),
        }
    }
}

impl FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icp_family" => Ok(SplitScheme::IcpFamily),
            "qd_soft" => Ok(SplitScheme::QdSoft),
            other => Err(Error::Config(format!(
                "unknown split scheme {other:?}; expected icp_family or qd_soft"
            ))),
        }
    }
}

/// Row indices of each partition. Calibration is empty under
/// [`SplitScheme::QdSoft`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplits {
    pub scheme: SplitScheme,
    pub seed: u64,
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DataSplits {
    pub fn n(&self) -> usize {
        self.train.len() + self.cal.len() + self.val.len() + self.test.len()
    }
}

/// Permutes `0..n` with a seeded generator and cuts contiguous slices in the
/// order train, calibration, validation, test. Held-out sizes are floors of
/// their fractions; the train slice absorbs the remainder.
pub fn make_splits(n: usize, scheme: SplitScheme, seed: u64) -> Result<DataSplits> {
    if n == 0 {
        return Err(Error::Contract("cannot split an empty dataset".into()));
    }
    let (f_cal, f_val, f_test) = scheme.held_out_fractions();
    let n_cal = (n as f64 * f_cal).floor() as usize;
    let n_val = (n as f64 * f_val).floor() as usize;
    let n_test = (n as f64 * f_test).floor() as usize;
    let n_train = n - n_cal - n_val - n_test;

    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);

    let mut rest = perm.split_off(n_train);
    let train = perm;
    let mut tail = rest.split_off(n_cal);
    let cal = rest;
    let val_tail = tail.split_off(n_val);
    let val = tail;
    Ok(DataSplits {
        scheme,
        seed,
        train,
        cal,
        val,
        test: val_tail,
    })
}

/// Per-column affine transform fitted on the training partition. Scales are
/// population standard deviations; columns with (numerically) zero spread
/// keep scale one so they pass through centered but unscaled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    feature_means: Vec<f64>,
    feature_scales: Vec<f64>,
    target_mean: f64,
    target_scale: f64,
}

const SCALE_FLOOR: f64 = 1e-12;

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let scale = var.sqrt();
    (mean, if scale < SCALE_FLOOR { 1.0 } else { scale })
}

impl Standardization {
    pub fn fit(x: &Matrix, y: &[f64], train_rows: &[usize]) -> Result<Self> {
        if train_rows.is_empty() {
            return Err(Error::Contract(
                "standardization needs a non-empty training partition".into(),
            ));
        }
        if y.len() != x.rows() {
            return Err(Error::Contract(format!(
                "target length {} does not match {} design rows",
                y.len(),
                x.rows()
            )));
        }
        if let Some(&bad) = train_rows.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::Contract(format!(
                "training row {bad} out of bounds for {} rows",
                x.rows()
            )));
        }
        let n = train_rows.len();
        let mut feature_means = Vec::with_capacity(x.cols());
        let mut feature_scales = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let (mean, scale) = mean_and_scale(train_rows.iter().map(|&i| x.get(i, j)), n);
            feature_means.push(mean);
            feature_scales.push(scale);
        }
        let (target_mean, target_scale) = mean_and_scale(train_rows.iter().map(|&i| y[i]), n);
        Ok(Standardization {
            feature_means,
            feature_scales,
            target_mean,
            target_scale,
        })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.feature_means.len() {
            return Err(Error::Contract(format!(
                "standardization was fitted on {} columns, got {}",
                self.feature_means.len(),
                x.cols()
            )));
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.feature_means[j]) / self.feature_scales[j]
        }))
    }

    pub fn apply_targets(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .map(|v| (v - self.target_mean) / self.target_scale)
            .collect()
    }

    /// Maps a standardized target value back to raw units.
    pub fn invert_target(&self, v: f64) -> f64 {
        self.target_mean + self.target_scale * v
    }

    /// Factor converting standardized interval widths to raw units.
    pub fn target_scale(&self) -> f64 {
        self.target_scale
    }
}

/// Outcome counts of a CSV load.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadSummary {
    pub rows_kept: usize,
    pub rows_dropped: usize,
}

/// Reads a headered CSV into a [`Dataset`], taking `target` as the label
/// column and every other column as a feature.
///
/// Rows with any unparseable cell are dropped (counted in the summary), but
/// a column that never parses across the whole file is reported as
/// [`Error::NonNumericColumns`] instead, since dropping all rows would just
/// obscure the schema problem.
pub fn load_csv(path: &Path, target: &str) -> Result<(Dataset, LoadSummary)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::MissingColumn(target.to_owned()))?;

    let n_cols = headers.len();
    let mut parsed_rows: Vec<Vec<f64>> = Vec::new();
    let mut col_hits = vec![0usize; n_cols];
    let mut total_rows = 0usize;
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record?;
        if record.len() != n_cols {
            dropped += 1;
            continue;
        }
        total_rows += 1;
        let mut row = Vec::with_capacity(n_cols);
        let mut ok = true;
        for (j, cell) in record.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => {
                    col_hits[j] += 1;
                    row.push(v);
                }
                _ => ok = false,
            }
        }
        if ok {
            parsed_rows.push(row);
        } else {
            dropped += 1;
        }
    }

    if total_rows > 0 {
        let dead: Vec<String> = headers
            .iter()
            .zip(&col_hits)
            .filter(|(_, &hits)| hits == 0)
            .map(|(name, _)| name.clone())
            .collect();
        if !dead.is_empty() {
            return Err(Error::NonNumericColumns(dead));
        }
    }
    if parsed_rows.is_empty() {
        return Err(Error::Contract(format!(
            "no usable rows in {}",
            path.display()
        )));
    }

    let n = parsed_rows.len();
    let y: Vec<f64> = parsed_rows.iter().map(|r| r[target_idx]).collect();
    let x = Matrix::from_fn(n, n_cols - 1, |i, j| {
        let col = if j < target_idx { j } else { j + 1 };
        parsed_rows[i][col]
    });
    let feature_names = headers
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    Ok((
        Dataset {
            x,
            y,
            feature_names,
            target_name: target.to_owned(),
        },
        LoadSummary {
            rows_kept: n,
            rows_dropped: dropped,
        },
    ))
}

/// Draws a synthetic heteroscedastic regression problem:
/// `x ~ U(-1, 1)^dims` and `y = sin(pi x_1) + (0.2 + |x_2|) z` with standard
/// normal noise `z`. The noise scale varies with the second coordinate, so
/// locally adaptive intervals can beat constant-width ones.
pub fn synth_heteroscedastic(n: usize, dims: usize, seed: u64) -> Result<Dataset> {
    if dims < 2 {
        return Err(Error::Config(format!(
            "the synthetic generator needs at least 2 dims, got {dims}"
        )));
    }
    if n == 0 {
        return Err(Error::Config("cannot generate an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, dims);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..dims {
            x.set(i, j, rng.random_range(-1.0..1.0));
        }
        let z: f64 = rng.sample(StandardNormal);
        y.push((std::f64::consts::PI * x.get(i, 0)).sin() + (0.2 + x.get(i, 1).abs()) * z);
    }
    let feature_names = (1..=dims).map(|j| format!("x{j}")).collect();
    Ok(Dataset {
        x,
        y,
        feature_names,
        target_name: "y".to_owned(),
    })
}
