//! Training losses for the interval methods.
//!
//! All losses are built on the [`crate::diff`] tape so one `backward` call
//! yields parameter gradients. Three interval objectives live here:
//!
//! * [`embedded_icp_loss`]: expected interval width with the calibration
//!   step inside the graph. The gradient flows through both the batch sigmas
//!   and the selected calibration score.
//! * [`qd_soft_loss`]: captured width plus a hinged soft-coverage penalty,
//!   with the capture indicator detached from the graph.
//! * [`scpo_loss`]: squared soft-coverage deviation plus a width term whose
//!   quantile is a batch surrogate (with an additive variant behind
//!   [`LossConfig::scpo_literal_form`]).
//!
//! [`mse_loss`] and [`log_residual_targets`] support the two-stage
//! point-plus-spread baseline.

use serde::{Deserialize, Serialize};

use crate::conformal::{self, ConformalQuantile};
use crate::diff::{Tape, Value};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::{forward, HeadMode, HeadOutputs, NetConfig, TapeParams};

/// Default weight of the secondary loss term.
pub const DEFAULT_LAMBDA: f64 = 0.01;
/// Default sharpness of the sigmoid coverage surrogate.
pub const DEFAULT_GAMMA: f64 = 160.0;
/// Floor added to absolute residuals before taking logs in the two-stage
/// baseline, so exactly fitted points stay finite.
pub const RESIDUAL_FLOOR: f64 = 1e-6;

/// Shared knobs of the interval losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Miscoverage rate; intervals target coverage `1 - epsilon`.
    pub epsilon: f64,
    /// Weight of the coverage penalty (QD-soft) or width term (SCPO).
    pub lambda: f64,
    /// Sigmoid sharpness in the soft coverage surrogate.
    pub gamma: f64,
    /// Use the additive `picp_soft + lambda * width` form of the SCPO loss
    /// instead of the squared-deviation form.
    pub scpo_literal_form: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 0.1,
            lambda: DEFAULT_LAMBDA,
            gamma: DEFAULT_GAMMA,
            scpo_literal_form: false,
        }
    }
}

impl LossConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        LossConfig {
            epsilon,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie strictly between 0 and 1, got {}",
                self.epsilon
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be finite and positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Embedded-calibration width loss plus the quantile diagnostics of the
/// calibration pass.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedIcpLoss {
    pub loss: Value,
    pub quantile: ConformalQuantile,
}

/// QD-soft loss value together with the batch coverage diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct QdSoftLoss {
    pub loss: Value,
    pub picp_soft: f64,
    pub mpiw_capt: f64,
    pub captured: usize,
    /// Examples whose upper bound fell below the lower bound. Tolerated by
    /// the loss; callers may want to flag runs where this stays non-zero.
    pub crossed: usize,
}

/// SCPO loss value together with the surrogate quantile diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct ScpoLoss {
    pub loss: Value,
    pub quantile: ConformalQuantile,
    pub picp_soft: f64,
    pub mpiw_nncm: f64,
}

fn require_head_mode(config: &NetConfig, mode: HeadMode, what: &str) -> Result<()> {
    if config.head_mode != mode {
        return Err(Error::Contract(format!(
            "{what} needs a {mode:?} network, got {:?}",
            config.head_mode
        )));
    }
    Ok(())
}

fn check_targets(x: &Matrix, y: &Matrix, what: &str) -> Result<()> {
    if y.cols() != 1 || y.rows() != x.rows() {
        return Err(Error::Contract(format!(
            "{what} needs an n x 1 target column matching the {} inputs, got {}x{}",
            x.rows(),
            y.rows(),
            y.cols()
        )));
    }
    Ok(())
}

fn ms_parts(out: HeadOutputs) -> (Value, Value) {
    match out {
        HeadOutputs::Ms { m, sigma, .. } => (m, sigma),
        _ => unreachable!("head mode checked by the caller"),
    }
}

/// Interval-width objective with the calibration step inside the graph.
///
/// The network is run on the gradient batch and on the calibration set. The
/// calibration pass yields normalized scores `|y - m| / sigma` whose
/// conformal quantile `q` at `epsilon` enters the loss through a gather, so
/// the loss is `2 q * mean(sigma)` over the batch and the gradient reaches
/// the selected calibration example as well as every batch sigma.
///
/// Fails with [`Error::InsufficientCalibration`] when the calibration set is
/// too small for a finite quantile at this `epsilon`.
pub fn embedded_icp_loss(
    tape: &mut Tape,
    config: &NetConfig,
    params: &TapeParams,
    batch_x: &Matrix,
    cal_x: &Matrix,
    cal_y: &Matrix,
    cfg: &LossConfig,
) -> Result<EmbeddedIcpLoss> {
    cfg.validate()?;
    require_head_mode(config, HeadMode::Ms, "the embedded ICP loss")?;
    check_targets(cal_x, cal_y, "the embedded ICP loss")?;
    let xb = tape.leaf(batch_x.clone())?;
    let (_, sigma_b) = ms_parts(forward(tape, config, params, xb)?);
    let xc = tape.leaf(cal_x.clone())?;
    let (m_c, sigma_c) = ms_parts(forward(tape, config, params, xc)?);
    let yc = tape.leaf(cal_y.clone())?;
    let alphas = conformal::ncm(tape, yc, m_c, sigma_c)?;
    let (q, quantile) = conformal::quantile_on_tape(tape, alphas, cfg.epsilon)?;
    let mean_sigma = tape.mean(sigma_b)?;
    let half = tape.mul(q, mean_sigma)?;
    let loss = tape.scale(half, 2.0)?;
    Ok(EmbeddedIcpLoss { loss, quantile })
}

/// Soft per-example coverage `S(gamma (y - l)) * S(gamma (u - y))`.
fn soft_capture(tape: &mut Tape, y: Value, lower: Value, upper: Value, gamma: f64) -> Result<Value> {
    let dl = tape.sub(y, lower)?;
    let du = tape.sub(upper, y)?;
    let dl = tape.scale(dl, gamma)?;
    let du = tape.scale(du, gamma)?;
    let kl = tape.sigmoid(dl)?;
    let ku = tape.sigmoid(du)?;
    tape.mul(kl, ku)
}

/// Captured-width loss with a hinged soft-coverage penalty:
///
/// `MPIW_capt + lambda * n / (epsilon (1 - epsilon)) * max(0, (1 - epsilon) - PICP_soft)^2`
///
/// where `MPIW_capt` averages interval width over the examples the hard
/// (closed-bound) intervals capture and `PICP_soft` is the mean product of
/// steep sigmoids. The hard capture indicator is held constant: only the
/// widths and the soft coverage carry gradient.
pub fn qd_soft_loss(
    tape: &mut Tape,
    config: &NetConfig,
    params: &TapeParams,
    x: &Matrix,
    y: &Matrix,
    cfg: &LossConfig,
) -> Result<QdSoftLoss> {
    cfg.validate()?;
    require_head_mode(config, HeadMode::LowerUpper, "the QD-soft loss")?;
    check_targets(x, y, "the QD-soft loss")?;
    let n = x.rows();
    let xv = tape.leaf(x.clone())?;
    let (lower, upper) = match forward(tape, config, params, xv)? {
        HeadOutputs::LowerUpper { lower, upper } => (lower, upper),
        _ => unreachable!("head mode checked above"),
    };
    let yv = tape.leaf(y.clone())?;

    let mut k_hard = vec![0.0; n];
    let mut captured = 0usize;
    let mut crossed = 0usize;
    {
        let l_vals = tape.value(lower).as_slice();
        let u_vals = tape.value(upper).as_slice();
        for i in 0..n {
            let y_i = y.as_slice()[i];
            if u_vals[i] < l_vals[i] {
                crossed += 1;
            }
            if l_vals[i] <= y_i && y_i <= u_vals[i] {
                k_hard[i] = 1.0;
                captured += 1;
            }
        }
    }
    let k_leaf = tape.leaf_column(&k_hard)?;
    let width = tape.sub(upper, lower)?;
    let caught = tape.mul(width, k_leaf)?;
    let caught_sum = tape.sum(caught)?;
    let mpiw_capt = tape.scale(caught_sum, 1.0 / captured.max(1) as f64)?;

    let k_soft = soft_capture(tape, yv, lower, upper, cfg.gamma)?;
    let picp_soft = tape.mean(k_soft)?;
    let target = tape.leaf_scalar(1.0 - cfg.epsilon)?;
    let gap = tape.sub(target, picp_soft)?;
    let hinge = tape.relu(gap)?;
    let hinge_sq = tape.square(hinge)?;
    let penalty_scale = cfg.lambda * n as f64 / (cfg.epsilon * (1.0 - cfg.epsilon));
    let penalty = tape.scale(hinge_sq, penalty_scale)?;
    let loss = tape.add(mpiw_capt, penalty)?;
    Ok(QdSoftLoss {
        loss,
        picp_soft: tape.scalar_value(picp_soft),
        mpiw_capt: tape.scalar_value(mpiw_capt),
        captured,
        crossed,
    })
}

/// Soft-coverage objective with a surrogate-calibrated width term.
///
/// The batch's own scores `|y - m| / sigma` stand in for a calibration set:
/// their conformal quantile `q` gives intervals `m ± q sigma` whose soft
/// coverage and width `2 q * mean(sigma)` form the loss
///
/// `((1 - epsilon) - PICP_soft)^2 + lambda * width`
///
/// or, with [`LossConfig::scpo_literal_form`], `PICP_soft + lambda * width`.
/// The gradient flows through the quantile selection in both terms.
pub fn scpo_loss(
    tape: &mut Tape,
    config: &NetConfig,
    params: &TapeParams,
    x: &Matrix,
    y: &Matrix,
    cfg: &LossConfig,
) -> Result<ScpoLoss> {
    cfg.validate()?;
    require_head_mode(config, HeadMode::Ms, "the SCPO loss")?;
    check_targets(x, y, "the SCPO loss")?;
    let xv = tape.leaf(x.clone())?;
    let (m, sigma) = ms_parts(forward(tape, config, params, xv)?);
    let yv = tape.leaf(y.clone())?;
    let alphas = conformal::ncm(tape, yv, m, sigma)?;
    let (q, quantile) = conformal::quantile_on_tape(tape, alphas, cfg.epsilon)?;
    let mean_sigma = tape.mean(sigma)?;
    let half_width = tape.mul(q, mean_sigma)?;
    let width = tape.scale(half_width, 2.0)?;

    let half = tape.mul(q, sigma)?;
    let lower = tape.sub(m, half)?;
    let upper = tape.add(m, half)?;
    let k_soft = soft_capture(tape, yv, lower, upper, cfg.gamma)?;
    let picp_soft = tape.mean(k_soft)?;

    let scaled_width = tape.scale(width, cfg.lambda)?;
    let loss = if cfg.scpo_literal_form {
        tape.add(picp_soft, scaled_width)?
    } else {
        let target = tape.leaf_scalar(1.0 - cfg.epsilon)?;
        let gap = tape.sub(target, picp_soft)?;
        let gap_sq = tape.square(gap)?;
        tape.add(gap_sq, scaled_width)?
    };
    Ok(ScpoLoss {
        loss,
        quantile,
        picp_soft: tape.scalar_value(picp_soft),
        mpiw_nncm: tape.scalar_value(width),
    })
}

/// Mean squared error of a tape column against fixed targets.
pub fn mse_loss(tape: &mut Tape, predictions: Value, targets: &Matrix) -> Result<Value> {
    let (rows, cols) = (tape.value(predictions).rows(), tape.value(predictions).cols());
    if cols != 1 || targets.rows() != rows || targets.cols() != 1 {
        return Err(Error::Contract(format!(
            "mse_loss needs matching n x 1 columns, got predictions {rows}x{cols} \
             and targets {}x{}",
            targets.rows(),
            targets.cols()
        )));
    }
    let t = tape.leaf(targets.clone())?;
    let diff = tape.sub(predictions, t)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Regression targets for the spread stage of the two-stage baseline:
/// `ln(|y - m| + RESIDUAL_FLOOR)`.
pub fn log_residual_targets(y: &[f64], m: &[f64]) -> Result<Matrix> {
    if y.len() != m.len() {
        return Err(Error::Contract(format!(
            "log_residual_targets needs equal lengths, got {} and {}",
            y.len(),
            m.len()
        )));
    }
    let targets: Vec<f64> = y
        .iter()
        .zip(m)
        .map(|(y, m)| ((y - m).abs() + RESIDUAL_FLOOR).ln())
        .collect();
    Ok(Matrix::column(&targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{check_gradient, GradCheck};
    use crate::metrics;
    use crate::network::{assemble_tape_params, evaluate, register_params, ModelParams};
    use crate::conformal::predict_intervals;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ms_config(input_dim: usize, hidden: Vec<usize>) -> NetConfig {
        NetConfig::new(input_dim).with_hidden(hidden)
    }

    #[test]
    fn loss_config_rejects_bad_knobs() {
        assert!(LossConfig::with_epsilon(0.0).validate().is_err());
        assert!(LossConfig::with_epsilon(1.0).validate().is_err());
        let bad_lambda = LossConfig {
            lambda: -1.0,
            ..LossConfig::default()
        };
        assert!(bad_lambda.validate().is_err());
        let bad_gamma = LossConfig {
            gamma: 0.0,
            ..LossConfig::default()
        };
        assert!(bad_gamma.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn losses_reject_wrong_head_modes() {
        let config = ms_config(1, vec![]);
        let params = ModelParams::zeros(&config).unwrap();
        let mut tape = Tape::new();
        let tp = register_params(&mut tape, &params).unwrap();
        let x = Matrix::column(&[0.0]);
        let y = Matrix::column(&[1.0]);
        let err = qd_soft_loss(&mut tape, &config, &tp, &x, &y, &LossConfig::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_network_embedded_loss_matches_hand_computation() {
        // With zero parameters m = 0 and sigma = exp(0) = 1 everywhere, so
        // the scores equal |y|. Targets 1..10 at epsilon 0.2 select rank 9,
        // q = 9, and the loss is 2 * 9 * mean(sigma) = 18.
        let config = ms_config(1, vec![]);
        let params = ModelParams::zeros(&config).unwrap();
        let cfg = LossConfig::with_epsilon(0.2);
        let batch_x = Matrix::column(&[0.5, -1.0, 2.0]);
        let cal_x = Matrix::column(&[0.0; 10]);
        let cal_y = Matrix::column(&(1..=10).map(f64::from).collect::<Vec<_>>());

        let mut tape = Tape::new();
        let tp = register_params(&mut tape, &params).unwrap();
        let out =
            embedded_icp_loss(&mut tape, &config, &tp, &batch_x, &cal_x, &cal_y, &cfg).unwrap();
        assert_eq!(tape.scalar_value(out.loss), 18.0);
        assert_eq!(out.quantile.q, 9.0);
        assert_eq!(out.quantile.rank, 9);
        assert_eq!(out.quantile.index, Some(8));

        // At this point the two gradient routes into the s head cancel
        // exactly: the batch width term contributes 2q * mean(sigma) = 18
        // and the selected score responds with -2 * y_9 / sigma = -18. The m
        // head only enters through the selected score, giving -2.
        let grads = tape.backward(out.loss).unwrap();
        let m_bias = grads.wrt(tp.heads[0].1).unwrap();
        assert_eq!(m_bias.as_slice(), &[-2.0]);
        let s_bias = grads.wrt(tp.heads[1].1).unwrap();
        assert_eq!(s_bias.as_slice(), &[0.0]);
    }

    #[test]
    fn embedded_loss_surfaces_insufficient_calibration() {
        let config = ms_config(1, vec![]);
        let params = ModelParams::zeros(&config).unwrap();
        let cfg = LossConfig::with_epsilon(0.1);
        let batch_x = Matrix::column(&[0.0]);
        let cal_x = Matrix::column(&[0.0; 4]);
        let cal_y = Matrix::column(&[1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::new();
        let tp = register_params(&mut tape, &params).unwrap();
        let err = embedded_icp_loss(&mut tape, &config, &tp, &batch_x, &cal_x, &cal_y, &cfg);
        assert!(matches!(err, Err(Error::InsufficientCalibration { .. })));
    }

    #[test]
    fn qd_toy_loss_matches_hand_computed_value() {
        // One-hot inputs and an empty trunk let the upper head's weights set
        // the bounds directly: example 1 gets [0, 1], example 2 gets [0, 3].
        // y_1 = ln(7/3) / gamma sits inside its interval with soft capture
        // sigmoid(ln(7/3)) * sigmoid(large) = 0.7; y_2 = 0 sits exactly on
        // its lower bound for a soft capture of 0.5 and a hard capture of 1.
        // So PICP_soft = 0.6, MPIW_capt = 2, and at epsilon 0.2 the penalty
        // is 0.01 * (2 / 0.16) * 0.2^2 = 0.005.
        let config = ms_config(2, vec![]).with_head_mode(HeadMode::LowerUpper);
        let mut params = ModelParams::zeros(&config).unwrap();
        params.heads[1].w = Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        let cfg = LossConfig::with_epsilon(0.2);
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y1 = (7.0f64 / 3.0).ln() / cfg.gamma;
        let y = Matrix::column(&[y1, 0.0]);

        let mut tape = Tape::new();
        let tp = register_params(&mut tape, &params).unwrap();
        let out = qd_soft_loss(&mut tape, &config, &tp, &x, &y, &cfg).unwrap();
        assert_eq!(out.captured, 2);
        assert_eq!(out.crossed, 0);
        assert!((out.picp_soft - 0.6).abs() < 1e-12);
        assert!((out.mpiw_capt - 2.0).abs() < 1e-12);
        assert!((tape.scalar_value(out.loss) - 2.005).abs() < 1e-12);

        // Independent recomputation through the scalar metrics path.
        let intervals = vec![
            crate::conformal::PredictionInterval {
                lower: 0.0,
                upper: 1.0,
            },
            crate::conformal::PredictionInterval {
                lower: 0.0,
                upper: 3.0,
            },
        ];
        let ys = [y1, 0.0];
        let picp_soft = metrics::picp_soft(&intervals, &ys, cfg.gamma);
        let hinge = (1.0 - cfg.epsilon - picp_soft).max(0.0);
        let manual = metrics::mpiw_capt(&intervals, &ys)
            + cfg.lambda * 2.0 / (cfg.epsilon * (1.0 - cfg.epsilon)) * hinge * hinge;
        assert!((tape.scalar_value(out.loss) - manual).abs() < 1e-12);
    }

    #[test]
    fn qd_capture_indicator_carries_no_gradient() {
        // A single example near its upper bound: were the capture indicator
        // soft, the width term's gradient through it would be around 22 per
        // unit of upper bound. Detached, the width gradients are exactly
        // +1 and -1 (the hinge is inactive since soft coverage 0.83 > 0.8).
        let config = ms_config(1, vec![]).with_head_mode(HeadMode::LowerUpper);
        let mut params = ModelParams::zeros(&config).unwrap();
        params.heads[1].w = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let cfg = LossConfig::with_epsilon(0.2);
        let x = Matrix::column(&[1.0]);
        let y = Matrix::column(&[0.99]);

        let mut tape = Tape::new();
        let tp = register_params(&mut tape, &params).unwrap();
        let out = qd_soft_loss(&mut tape, &config, &tp, &x, &y, &cfg).unwrap();
        assert_eq!(tape.scalar_value(out.loss), 1.0);
        let grads = tape.backward(out.loss).unwrap();
        assert_eq!(grads.wrt(tp.heads[1].0).unwrap().as_slice(), &[1.0]);
        assert_eq!(grads.wrt(tp.heads[0].0).unwrap().as_slice(), &[-1.0]);
    }

    #[test]
    fn scpo_loss_matches_scalar_recomputation() {
        // Zero net on targets 1..10 at epsilon 0.2: the surrogate quantile
        // is 9, the width term 2 * 9 * 1 = 18, and the soft coverage of
        // [-9, 9] is recomputed independently through the metrics path.
        let config = ms_config(1, vec![]);
        let params = ModelParams::zeros(&config).unwrap();
        let x = Matrix::column(&[0.0; 10]);
        let ys: Vec<f64> = (1..=10).map(f64::from).collect();
        let y = Matrix::column(&ys);

        let cfg = LossConfig::with_epsilon(0.2);
        let mut tape = Tape::new();
        let tp = register_params(&mut tape, &params).unwrap();
        let out = scpo_loss(&mut tape, &config, &tp, &x, &y, &cfg).unwrap();
        assert_eq!(out.quantile.q, 9.0);
        assert_eq!(out.mpiw_nncm, 18.0);

        let intervals = predict_intervals(&[0.0; 10], &[1.0; 10], 9.0).unwrap();
        let picp_soft = metrics::picp_soft(&intervals, &ys, cfg.gamma);
        assert!((out.picp_soft - picp_soft).abs() < 1e-12);
        let gap = (1.0 - cfg.epsilon) - picp_soft;
        let manual = gap * gap + cfg.lambda * 18.0;
        assert!((tape.scalar_value(out.loss) - manual).abs() < 1e-12);

        let literal = LossConfig {
            scpo_literal_form: true,
            ..cfg
        };
        let mut tape = Tape::new();
        let tp = register_params(&mut tape, &params).unwrap();
        let out = scpo_loss(&mut tape, &config, &tp, &x, &y, &literal).unwrap();
        let manual = picp_soft + cfg.lambda * 18.0;
        assert!((tape.scalar_value(out.loss) - manual).abs() < 1e-12);
    }

    #[test]
    fn mse_and_log_residual_targets_match_hand_values() {
        let config = ms_config(1, vec![]).with_head_mode(HeadMode::Single);
        let params = ModelParams::zeros(&config).unwrap();
        let mut tape = Tape::new();
        let tp = register_params(&mut tape, &params).unwrap();
        let x = Matrix::column(&[0.3, -0.7]);
        let xv = tape.leaf(x).unwrap();
        let pred = match forward(&mut tape, &config, &tp, xv).unwrap() {
            HeadOutputs::Single { out } => out,
            _ => unreachable!(),
        };
        let loss = mse_loss(&mut tape, pred, &Matrix::column(&[1.0, 2.0])).unwrap();
        assert_eq!(tape.scalar_value(loss), 2.5);

        let targets = log_residual_targets(&[3.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!((targets.as_slice()[0] - (2.0f64 + RESIDUAL_FLOOR).ln()).abs() < 1e-15);
        assert!((targets.as_slice()[1] - RESIDUAL_FLOOR.ln()).abs() < 1e-15);
        assert!(log_residual_targets(&[1.0], &[1.0, 2.0]).is_err());
    }

    fn random_column(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn embedded_loss_gradient_matches_finite_differences() {
        let config = ms_config(2, vec![3]);
        let cfg = LossConfig::with_epsilon(0.2);
        let mut best = None;
        for attempt in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + attempt);
            let batch_x = random_matrix(&mut rng, 5, 2, 0.5);
            let cal_x = random_matrix(&mut rng, 7, 2, 0.5);
            let cal_y = Matrix::column(&random_column(&mut rng, 7, 0.5));
            let point = ModelParams::init(&config, 40 + attempt).unwrap().to_flat();
            let check = check_gradient(
                |tape, leaves| {
                    let tp = assemble_tape_params(tape, &config, leaves)?;
                    let out =
                        embedded_icp_loss(tape, &config, &tp, &batch_x, &cal_x, &cal_y, &cfg)?;
                    Ok(out.loss)
                },
                &point,
                1e-6,
            )
            .unwrap();
            if let GradCheck::Scored { max_rel_err } = check {
                best = Some(max_rel_err);
                break;
            }
        }
        let err = best.expect("no smooth point found in 50 attempts");
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn qd_soft_gradient_matches_finite_differences() {
        let config = ms_config(2, vec![3]).with_head_mode(HeadMode::LowerUpper);
        let cfg = LossConfig::with_epsilon(0.2);
        let mut best = None;
        for attempt in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + attempt);
            let x = random_matrix(&mut rng, 6, 2, 0.5);
            let params = ModelParams::init(&config, 60 + attempt).unwrap();
            // Keep the sigmoid arguments moderate by sampling targets near
            // the interval midpoints; far outside, the surrogate saturates
            // and central differences only see float noise.
            let outs = evaluate(&params, &x).unwrap();
            let (lower, upper) = outs.bounds().unwrap();
            let y: Vec<f64> = lower
                .iter()
                .zip(&upper)
                .map(|(l, u)| 0.5 * (l + u) + rng.random_range(-0.05..0.05))
                .collect();
            let y = Matrix::column(&y);
            let point = params.to_flat();
            let check = check_gradient(
                |tape, leaves| {
                    let tp = assemble_tape_params(tape, &config, leaves)?;
                    let out = qd_soft_loss(tape, &config, &tp, &x, &y, &cfg)?;
                    Ok(out.loss)
                },
                &point,
                1e-6,
            )
            .unwrap();
            if let GradCheck::Scored { max_rel_err } = check {
                best = Some(max_rel_err);
                break;
            }
        }
        let err = best.expect("no smooth point found in 50 attempts");
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn scpo_gradient_matches_finite_differences() {
        let config = ms_config(2, vec![3]);
        let cfg = LossConfig::with_epsilon(0.2);
        let mut best = None;
        for attempt in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + attempt);
            let x = random_matrix(&mut rng, 8, 2, 0.5);
            let y = Matrix::column(&random_column(&mut rng, 8, 0.5));
            let point = ModelParams::init(&config, 80 + attempt).unwrap().to_flat();
            let check = check_gradient(
                |tape, leaves| {
                    let tp = assemble_tape_params(tape, &config, leaves)?;
                    let out = scpo_loss(tape, &config, &tp, &x, &y, &cfg)?;
                    Ok(out.loss)
                },
                &point,
                1e-6,
            )
            .unwrap();
            if let GradCheck::Scored { max_rel_err } = check {
                best = Some(max_rel_err);
                break;
            }
        }
        let err = best.expect("no smooth point found in 50 attempts");
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_descent_shrinks_the_embedded_loss()  {
        let config = ms_config(2, vec![6]);
        let cfg = LossConfig::with_epsilon(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 40, 2, 1.0);
        let y: Vec<f64> = (0..40)
            .map(|i| x.get(i, 0) + 0.1 * rng.random_range(-1.0..1.0))
            .collect();
        let batch_x = Matrix::from_fn(20, 2, |i, j| x.get(i, j));
        let cal_x = Matrix::from_fn(20, 2, |i, j| x.get(i + 20, j));
        let cal_y = Matrix::column(&y[20..]);

        let mut params = ModelParams::init(&config, 11).unwrap();
        let mut first = None;
        let mut last = None;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let tp = register_params(&mut tape, &params).unwrap();
            let out = embedded_icp_loss(&mut tape, &config, &tp, &batch_x, &cal_x, &cal_y, &cfg)
                .unwrap();
            let loss = tape.scalar_value(out.loss);
            first.get_or_insert(loss);
            last = Some(loss);
            let grads = tape.backward(out.loss).unwrap();
            let handles = tp.slots();
            for (slot, handle) in params.slots_mut().into_iter().zip(handles) {
                if let Some(g) = grads.wrt(handle) {
                    slot.add_assign(&g.map(|v| -0.05 * v));
                }
            }
        }
        let (first, last) = (first.unwrap(), last.unwrap());
        assert!(
            last < 0.8 * first,
            "50 steps did not shrink the loss: {first} -> {last}"
        );
    }
}
