//! Interval quality metrics: empirical coverage (PICP), mean width (MPIW),
//! and the soft/captured variants used inside direct interval losses.
//!
//! All functions require equal-length, nonempty inputs; interval bounds are
//! closed, so a point exactly on a bound counts as covered. An unbounded
//! interval covers everything and contributes an infinite width.

use serde::{Deserialize, Serialize};

use crate::conformal::PredictionInterval;

/// Summary of a batch of intervals against observed targets.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IntervalMetrics {
    pub picp: f64,
    pub mpiw: f64,
    /// Mean width over captured points only (0 when nothing is captured).
    pub mpiw_capt: f64,
    pub captured: usize,
    pub n: usize,
}

fn check_lengths(intervals: &[PredictionInterval], y: &[f64]) {
    assert!(!intervals.is_empty(), "metrics need at least one interval");
    assert_eq!(
        intervals.len(),
        y.len(),
        "metrics need one target per interval"
    );
}

/// Fraction of targets falling inside their interval (closed bounds).
pub fn picp(intervals: &[PredictionInterval], y: &[f64]) -> f64 {
    check_lengths(intervals, y);
    let covered = intervals
        .iter()
        .zip(y)
        .filter(|(iv, &y)| iv.contains(y))
        .count();
    covered as f64 / y.len() as f64
}

/// Mean interval width. Crossed bounds contribute their negative width
/// as-is; hiding them would make a broken interval head look efficient.
pub fn mpiw(intervals: &[PredictionInterval]) -> f64 {
    assert!(!intervals.is_empty(), "metrics need at least one interval");
    let mut acc = 0.0;
    for iv in intervals {
        acc += iv.width();
    }
    acc / intervals.len() as f64
}

/// Differentiable surrogate coverage: the product of two steep sigmoids per
/// example, `S(gamma (y - lower)) * S(gamma (upper - y))`, averaged. The
/// sigmoid argument is clamped to [-500, 500] to keep the exponential
/// finite; at `gamma` of a few hundred the product is within float noise of
/// the hard indicator except very near the bounds.
pub fn picp_soft(intervals: &[PredictionInterval], y: &[f64], gamma: f64) -> f64 {
    check_lengths(intervals, y);
    assert!(gamma > 0.0, "gamma must be positive");
    let mut acc = 0.0;
    for (iv, &y) in intervals.iter().zip(y) {
        acc += sigmoid_clamped(gamma * (y - iv.lower)) * sigmoid_clamped(gamma * (iv.upper - y));
    }
    acc / y.len() as f64
}

/// Mean width restricted to captured points: `sum(width_i k_i) / max(c, 1)`
/// where `k_i` is the hard coverage indicator and `c` the captured count.
pub fn mpiw_capt(intervals: &[PredictionInterval], y: &[f64]) -> f64 {
    check_lengths(intervals, y);
    let mut acc = 0.0;
    let mut captured = 0usize;
    for (iv, &y) in intervals.iter().zip(y) {
        if iv.contains(y) {
            acc += iv.width();
            captured += 1;
        }
    }
    acc / captured.max(1) as f64
}

/// All four hard metrics in one pass.
pub fn interval_metrics(intervals: &[PredictionInterval], y: &[f64]) -> IntervalMetrics {
    check_lengths(intervals, y);
    let mut width_sum = 0.0;
    let mut capt_width_sum = 0.0;
    let mut captured = 0usize;
    for (iv, &y) in intervals.iter().zip(y) {
        width_sum += iv.width();
        if iv.contains(y) {
            capt_width_sum += iv.width();
            captured += 1;
        }
    }
    let n = y.len();
    IntervalMetrics {
        picp: captured as f64 / n as f64,
        mpiw: width_sum / n as f64,
        mpiw_capt: capt_width_sum / captured.max(1) as f64,
        captured,
        n,
    }
}

fn sigmoid_clamped(x: f64) -> f64 {
    let x = x.clamp(-500.0, 500.0);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn iv(lower: f64, upper: f64) -> PredictionInterval {
        PredictionInterval::new(lower, upper)
    }

    /// Ten intervals with hand-counted coverage: points 0, 3 and 7 fall
    /// outside, points 4 and 5 sit exactly on a bound (covered).
    fn toy() -> (Vec<PredictionInterval>, Vec<f64>) {
        let intervals = vec![
            iv(0.0, 1.0),   // y = 1.5  -> out
            iv(-1.0, 1.0),  // y = 0.0  -> in
            iv(2.0, 5.0),   // y = 3.0  -> in
            iv(-2.0, -1.0), // y = 0.0  -> out
            iv(0.0, 2.0),   // y = 2.0  -> on upper bound, in
            iv(-3.0, 0.5),  // y = -3.0 -> on lower bound, in
            iv(1.0, 1.5),   // y = 1.2  -> in
            iv(4.0, 6.0),   // y = 3.9  -> out
            iv(-0.5, 0.5),  // y = 0.25 -> in
            iv(10.0, 14.0), // y = 12.0 -> in
        ];
        let y = vec![1.5, 0.0, 3.0, 0.0, 2.0, -3.0, 1.2, 3.9, 0.25, 12.0];
        (intervals, y)
    }

    #[test]
    fn hard_metrics_match_hand_counts() {
        let (intervals, y) = toy();
        // Widths: 1, 2, 3, 1, 2, 3.5, 0.5, 2, 1, 4 -> sum 20.
        // Captured widths: 2 + 3 + 2 + 3.5 + 0.5 + 1 + 4 = 16, over 7 points.
        assert!((picp(&intervals, &y) - 0.7).abs() < 1e-12);
        assert!((mpiw(&intervals) - 2.0).abs() < 1e-12);
        assert!((mpiw_capt(&intervals, &y) - 16.0 / 7.0).abs() < 1e-12);

        let all = interval_metrics(&intervals, &y);
        assert_eq!(all.captured, 7);
        assert_eq!(all.n, 10);
        assert!((all.picp - 0.7).abs() < 1e-12);
        assert!((all.mpiw - 2.0).abs() < 1e-12);
        assert!((all.mpiw_capt - 16.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn soft_coverage_approaches_hard_coverage_at_large_gamma() {
        // Keep every point at least 0.25 away from each bound so the
        // sigmoids saturate; the two on-bound examples from the toy are
        // nudged inside.
        let (mut intervals, y) = toy();
        intervals[4] = iv(0.0, 2.25);
        intervals[5] = iv(-3.25, 0.5);
        let hard = picp(&intervals, &y);
        let soft = picp_soft(&intervals, &y, 1e6);
        assert!(
            (soft - hard).abs() < 1e-6,
            "soft {soft} vs hard {hard} at gamma=1e6"
        );
    }

    #[test]
    fn soft_coverage_matches_scalar_evaluation_at_moderate_gamma() {
        let intervals = vec![iv(0.0, 1.0), iv(-1.0, 0.5), iv(0.2, 0.9)];
        let y = vec![0.4, 0.49, 1.1];
        let gamma = 160.0;
        let mut expected = 0.0;
        for (iv, &y) in intervals.iter().zip(&y) {
            let s = |x: f64| 1.0 / (1.0 + (-x.clamp(-500.0, 500.0)).exp());
            expected += s(gamma * (y - iv.lower)) * s(gamma * (iv.upper - y));
        }
        expected /= 3.0;
        assert!((picp_soft(&intervals, &y, gamma) - expected).abs() < 1e-12);
    }

    #[test]
    fn point_on_bound_counts_as_covered() {
        let intervals = vec![iv(1.0, 2.0)];
        assert_eq!(picp(&intervals, &[1.0]), 1.0);
        assert_eq!(picp(&intervals, &[2.0]), 1.0);
        assert_eq!(picp(&intervals, &[2.0000001]), 0.0);
    }

    #[test]
    fn unbounded_interval_covers_and_has_infinite_width() {
        let intervals = vec![iv(f64::NEG_INFINITY, f64::INFINITY), iv(0.0, 1.0)];
        let y = vec![1e308, 0.5];
        assert_eq!(picp(&intervals, &y), 1.0);
        assert!(mpiw(&intervals).is_infinite());
    }

    #[test]
    fn nothing_captured_gives_zero_capt_width() {
        let intervals = vec![iv(0.0, 1.0), iv(2.0, 3.0)];
        let y = vec![5.0, -5.0];
        assert_eq!(mpiw_capt(&intervals, &y), 0.0);
        assert_eq!(interval_metrics(&intervals, &y).captured, 0);
    }

    #[test]
    fn crossed_bounds_contribute_negative_width() {
        let intervals = vec![iv(1.0, 0.0), iv(0.0, 3.0)];
        assert!((mpiw(&intervals) - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn metrics_are_shift_invariant(
            bounds in prop::collection::vec((-10.0f64..10.0, 0.0f64..5.0), 1..30),
            ys in prop::collection::vec(-12.0f64..12.0, 30),
            shift in -50.0f64..50.0,
        ) {
            let intervals: Vec<PredictionInterval> =
                bounds.iter().map(|&(lo, w)| iv(lo, lo + w)).collect();
            let y: Vec<f64> = ys[..intervals.len()].to_vec();
            let shifted_iv: Vec<PredictionInterval> = intervals
                .iter()
                .map(|iv_| iv(iv_.lower + shift, iv_.upper + shift))
                .collect();
            let shifted_y: Vec<f64> = y.iter().map(|v| v + shift).collect();

            prop_assert_eq!(picp(&intervals, &y), picp(&shifted_iv, &shifted_y));
            prop_assert!((mpiw(&intervals) - mpiw(&shifted_iv)).abs() < 1e-9);
            prop_assert!(
                (mpiw_capt(&intervals, &y) - mpiw_capt(&shifted_iv, &shifted_y)).abs() < 1e-9
            );
        }

        #[test]
        fn picp_soft_lies_in_unit_interval(
            bounds in prop::collection::vec((-5.0f64..5.0, 0.0f64..4.0), 1..20),
            ys in prop::collection::vec(-8.0f64..8.0, 20),
            gamma in 1.0f64..500.0,
        ) {
            let intervals: Vec<PredictionInterval> =
                bounds.iter().map(|&(lo, w)| iv(lo, lo + w)).collect();
            let y = &ys[..intervals.len()];
            let soft = picp_soft(&intervals, y, gamma);
            prop_assert!((0.0..=1.0).contains(&soft));
        }
    }
}
