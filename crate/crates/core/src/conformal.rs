//! Inductive conformal prediction with a normalized nonconformity measure.
//!
//! A fitted point estimate `m(x)` and scale `sigma(x) > 0` turn each example
//! into the score `alpha = |y - m(x)| / sigma(x)`. Given calibration scores
//! `alpha_1..alpha_n` and a miscoverage rate `epsilon`, the conformal
//! quantile `q` is the `ceil((1 - epsilon) * (n + 1))`-th smallest score;
//! the interval `[m - q sigma, m + q sigma]` then covers a fresh exchangeable
//! example with probability at least `1 - epsilon`. When the required rank
//! exceeds `n` the quantile is infinite and the intervals degenerate to the
//! whole line, which callers surface as a flag rather than silently
//! narrowing.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Value};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{evaluate, ModelParams};

/// Normalized nonconformity scores of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NcmScores {
    values: Vec<f64>,
}

impl NcmScores {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

/// Plain-number scores `|y - m| / sigma`. Every `sigma` must be strictly
/// positive.
pub fn ncm_scores(y: &[f64], m: &[f64], sigma: &[f64]) -> Result<NcmScores> {
    if y.len() != m.len() || y.len() != sigma.len() {
        return Err(Error::Contract(format!(
            "ncm inputs must have equal lengths ({}, {}, {})",
            y.len(),
            m.len(),
            sigma.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Contract(format!(
            "ncm requires strictly positive sigma, found {s}"
        )));
    }
    let values = y
        .iter()
        .zip(m)
        .zip(sigma)
        .map(|((&y, &m), &s)| (y - m).abs() / s)
        .collect();
    Ok(NcmScores { values })
}

/// Tape version of the score: `abs(y - m) / sigma`, differentiable in `m`
/// and `sigma`. All three values must be `n x 1` columns.
pub fn ncm(tape: &mut Tape, y: Value, m: Value, sigma: Value) -> Result<Value> {
    let shape_of = |v: Value| (tape.value(v).rows(), tape.value(v).cols());
    let (rows, cols) = shape_of(y);
    if cols != 1 || shape_of(m) != (rows, 1) || shape_of(sigma) != (rows, 1) {
        return Err(Error::Contract(
            "ncm expects matching n x 1 columns for y, m and sigma".into(),
        ));
    }
    if let Some(s) = tape.value(sigma).as_slice().iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Contract(format!(
            "ncm requires strictly positive sigma, found {s}"
        )));
    }
    let resid = tape.sub(y, m)?;
    let dist = tape.abs(resid)?;
    tape.div(dist, sigma)
}

/// The conformal quantile of a calibration score set.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConformalQuantile {
    /// The selected score, or `f64::INFINITY` when the rank exceeds `n`.
    pub q: f64,
    /// 1-based rank `ceil((1 - epsilon) * (n + 1))`.
    pub rank: usize,
    /// Position of the selected score in the caller's ordering; among tied
    /// values the lowest original index wins. `None` when `q` is infinite.
    pub index: Option<usize>,
    pub epsilon: f64,
    pub n: usize,
    /// Gap between the selected score and the nearest other score. Zero when
    /// the selection is tied, infinite for singleton or unbounded quantiles.
    /// Gradient checks use this to reject points where the selection could
    /// flip under perturbation.
    pub tie_margin: f64,
}

impl ConformalQuantile {
    pub fn is_finite(&self) -> bool {
        self.index.is_some()
    }
}

/// Guard subtracted before `ceil` so products like `0.8 * 5` that are
/// mathematically integral cannot round up one rank due to float error.
const RANK_GUARD: f64 = 1e-9;

/// Computes the `ceil((1 - epsilon) * (n + 1))`-th smallest score.
///
/// Ties keep their stable sorted order and the reported index is the lowest
/// original position holding the selected value. A rank beyond `n` yields an
/// infinite quantile rather than an error; downstream consumers that cannot
/// tolerate unbounded intervals reject it themselves.
pub fn conformal_quantile(alphas: &[f64], epsilon: f64) -> Result<ConformalQuantile> {
    if alphas.is_empty() {
        return Err(Error::Contract("conformal_quantile of no scores".into()));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!(
            "epsilon must lie strictly between 0 and 1, got {epsilon}"
        )));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::Contract("scores must be finite".into()));
    }

    let n = alphas.len();
    let rank = ((1.0 - epsilon) * (n as f64 + 1.0) - RANK_GUARD).ceil() as usize;
    debug_assert!(rank >= 1);
    if rank > n {
        return Ok(ConformalQuantile {
            q: f64::INFINITY,
            rank,
            index: None,
            epsilon,
            n,
            tie_margin: f64::INFINITY,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| alphas[a].total_cmp(&alphas[b]));
    let q = alphas[order[rank - 1]];
    let index = alphas.iter().position(|&a| a == q);

    let mut tie_margin = f64::INFINITY;
    for (j, &a) in alphas.iter().enumerate() {
        if Some(j) != index {
            tie_margin = tie_margin.min((a - q).abs());
        }
    }

    Ok(ConformalQuantile {
        q,
        rank,
        index,
        epsilon,
        n,
        tie_margin,
    })
}

/// Selects the conformal quantile of a column of scores living on a tape.
///
/// The returned [`Value`] is a `gather` of the chosen element, so gradients
/// flow through that score alone. The selection's tie margin is noted on the
/// tape for kink detection. An infinite quantile is a hard error here because
/// a training loss cannot use it.
pub fn quantile_on_tape(
    tape: &mut Tape,
    alphas: Value,
    epsilon: f64,
) -> Result<(Value, ConformalQuantile)> {
    let values = tape.value(alphas).as_slice().to_vec();
    let sel = conformal_quantile(&values, epsilon)?;
    match sel.index {
        Some(index) => {
            tape.note_selection_margin(sel.tie_margin);
            let q = tape.gather(alphas, index)?;
            Ok((q, sel))
        }
        None => Err(Error::InsufficientCalibration {
            needed: sel.rank,
            have: sel.n,
            epsilon,
        }),
    }
}

/// One prediction interval; bounds are closed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lower: f64,
    pub upper: f64,
}

impl PredictionInterval {
    pub fn new(lower: f64, upper: f64) -> Self {
        PredictionInterval { lower, upper }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.lower && y <= self.upper
    }

    pub fn is_unbounded(&self) -> bool {
        !(self.lower.is_finite() && self.upper.is_finite())
    }

    /// Bound heads can cross; conformal intervals cannot.
    pub fn is_crossed(&self) -> bool {
        self.upper < self.lower
    }
}

/// Interval `[m - q sigma, m + q sigma]` for one example.
pub fn predict_interval(m: f64, sigma: f64, q: f64) -> PredictionInterval {
    debug_assert!(sigma > 0.0);
    PredictionInterval {
        lower: m - q * sigma,
        upper: m + q * sigma,
    }
}

pub fn predict_intervals(m: &[f64], sigma: &[f64], q: f64) -> Result<Vec<PredictionInterval>> {
    if m.len() != sigma.len() {
        return Err(Error::Contract(
            "predict_intervals requires matching m and sigma lengths".into(),
        ));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Contract(format!(
            "predict_intervals requires strictly positive sigma, found {s}"
        )));
    }
    Ok(m.iter()
        .zip(sigma)
        .map(|(&m, &s)| predict_interval(m, s, q))
        .collect())
}

/// Membership oracle for the conformal prediction set at one input, decided
/// by direct rank counting instead of the quantile shortcut.
///
/// A candidate `y` is included when `#{alpha_j >= A(x, y)} + 1` exceeds
/// `epsilon * (n + 1)`, i.e. when its score would not rank among the most
/// nonconforming `epsilon` fraction. On any grid this reproduces exactly the
/// set `{y : lower <= y <= upper}` from [`predict_intervals`]; the redundant
/// route exists so tests can cross-check the quantile arithmetic.
pub fn prediction_set_oracle(
    x: &[f64],
    y_grid: &[f64],
    calibration_alphas: &[f64],
    epsilon: f64,
    params: &ModelParams,
) -> Result<Vec<bool>> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Config(format!(
            "epsilon must lie strictly between 0 and 1, got {epsilon}"
        )));
    }
    let features = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let (m, sigma) = evaluate(params, &features)?.m_sigma()?;
    let (m, sigma) = (m[0], sigma[0]);
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!(
            "oracle requires strictly positive sigma, got {sigma}"
        )));
    }

    let n = calibration_alphas.len() as f64;
    // The small guard keeps integral epsilon * (n + 1) products from
    // spuriously flipping the strict comparison; see RANK_GUARD.
    let threshold = epsilon * (n + 1.0) + RANK_GUARD;
    let mask = y_grid
        .iter()
        .map(|&y| {
            let a = (y - m).abs() / sigma;
            let at_least = calibration_alphas.iter().filter(|&&c| c >= a).count();
            (at_least + 1) as f64 > threshold
        })
        .collect();
    Ok(mask)
}
