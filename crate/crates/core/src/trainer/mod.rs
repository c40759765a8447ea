//! Training loops, trained-model containers and hyperparameter search.
//!
//! [`train`] drives one of four methods over a design matrix and target
//! vector that are assumed to be standardized already:
//!
//! * `Doicr`: two-head network under the embedded-calibration width loss.
//!   Each epoch re-partitions the training set into a gradient part and a
//!   calibration part (fraction [`TrainConfig::r`]); freezing that
//!   partition via [`TrainConfig::fixed_embedded_split`] reproduces the
//!   training-coverage collapse that motivates the re-draw.
//! * `Scpo`: two-head network under the surrogate-calibrated coverage loss.
//! * `QdSoft`: lower/upper-bound network under the captured-width loss.
//! * `Traditional`: two single-head networks fitted in sequence, mean
//!   squared error on the targets and then on log absolute residuals.
//!
//! Trained models are evaluated through [`calibrate_and_test`] (split
//! conformal calibration on held-out data) or [`test_direct_bounds`] for
//! bound networks.

pub mod optim;

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{self, ConformalQuantile, PredictionInterval};
use crate::data::Standardization;
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig};
use crate::matrix::Matrix;
use crate::metrics::{self, IntervalMetrics};
use crate::network::{evaluate, register_params, HeadMode, ModelParams, NetConfig, S_CLAMP};
use optim::{clip_global_norm, Optimizer, OptimizerKind};

pub const DEFAULT_GRAD_CLIP: f64 = 10.0;
pub const DEFAULT_EMBEDDED_SPLIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Doicr,
    QdSoft,
    Scpo,
    Traditional,
}

impl Method {
    pub fn head_mode(self) -> HeadMode {
        match self {
            Method::Doicr | Method::Scpo => HeadMode::Ms,
            Method::QdSoft => HeadMode::LowerUpper,
            Method::Traditional => HeadMode::Single,
        }
    }

    /// Whether test-time intervals come from split conformal calibration.
    pub fn uses_calibration(self) -> bool {
        !matches!(self, Method::QdSoft)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::Doicr => "doicr",
            Method::QdSoft => "qdsoft",
            Method::Scpo => "scpo",
            Method::Traditional => "traditional",
        };
        f.write_str(name)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doicr" => Ok(Method::Doicr),
            "qdsoft" | "qd_soft" => Ok(Method::QdSoft),
            "scpo" => Ok(Method::Scpo),
            "traditional" => Ok(Method::Traditional),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected doicr, qdsoft, scpo or traditional"
            ))),
        }
    }
}

/// Knobs shared by every training loop. The defaults mirror the common
/// experimental protocol: AdamW, 1000 epochs, hidden widths [20, 20], and a
/// quarter of the training set playing calibration inside the embedded loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub hidden: Vec<usize>,
    /// Fraction of the training set held out as the embedded calibration
    /// part each epoch (Doicr only).
    pub r: f64,
    /// Keep the first embedded partition for the whole run instead of
    /// re-drawing it every epoch (Doicr only).
    pub fixed_embedded_split: bool,
    /// Gradients are rescaled when their global norm exceeds this.
    pub grad_clip: f64,
    pub seed: u64,
    /// Generator stream, decorrelating runs that share a seed (the grid
    /// search gives each point its own stream).
    pub stream: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            optimizer: OptimizerKind::AdamW,
            hidden: vec![20, 20],
            r: DEFAULT_EMBEDDED_SPLIT,
            fixed_embedded_split: false,
            grad_clip: DEFAULT_GRAD_CLIP,
            seed: 0,
            stream: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and positive, got {}",
                self.lr
            )));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Config(format!(
                "embedded split fraction must lie strictly between 0 and 1, got {}",
                self.r
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip must be positive, got {}",
                self.grad_clip
            )));
        }
        self.loss.validate()
    }
}

/// One epoch of training diagnostics. Coverage numbers are measured on the
/// gradient part of the training data with the interval the current network
/// would produce; methods without a meaningful quantile leave those fields
/// empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the epoch's batches.
    pub loss: f64,
    pub train_picp: Option<f64>,
    pub train_mpiw: Option<f64>,
    pub q: Option<f64>,
    /// Hash of the embedded calibration membership, for checking whether
    /// the partition actually moved between epochs.
    pub split_fingerprint: Option<String>,
}

/// Everything a training run leaves behind besides the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: Method,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Batches whose gradient norm exceeded [`TrainConfig::grad_clip`].
    pub clipped_batches: usize,
    /// Not serialized: replays of the same run must produce byte-identical
    /// reports, and wall time never does.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// A trained predictor in standardized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainedModel {
    /// Shared trunk with point and log-scale heads (Doicr, Scpo).
    TwoHead { params: ModelParams },
    /// Lower/upper bound network (QdSoft).
    Bounds { params: ModelParams },
    /// Separate point and log-residual networks (Traditional).
    TwoStage {
        point: ModelParams,
        spread: ModelParams,
    },
    /// A point network with unit scale everywhere, the non-normalized
    /// baseline.
    ConstSigma { point: ModelParams },
}

impl TrainedModel {
    /// Point prediction and positive scale for score-based methods.
    pub fn point_and_scale(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            TrainedModel::TwoHead { params } => evaluate(params, x)?.m_sigma(),
            TrainedModel::TwoStage { point, spread } => {
                let m = evaluate(point, x)?.single()?;
                let sigma = evaluate(spread, x)?
                    .single()?
                    .into_iter()
                    .map(|s| s.clamp(-S_CLAMP, S_CLAMP).exp())
                    .collect();
                Ok((m, sigma))
            }
            TrainedModel::ConstSigma { point } => {
                let m = evaluate(point, x)?.single()?;
                let n = m.len();
                Ok((m, vec![1.0; n]))
            }
            TrainedModel::Bounds { .. } => Err(Error::Contract(
                "bound networks have no point/scale decomposition".into(),
            )),
        }
    }

    /// Direct interval bounds for bound networks.
    pub fn bounds(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            TrainedModel::Bounds { params } => evaluate(params, x)?.bounds(),
            _ => Err(Error::Contract(
                "only bound networks predict intervals directly".into(),
            )),
        }
    }

    /// The same point network with its scale head ignored. Only two-stage
    /// models support this view.
    pub fn const_sigma_view(&self) -> Option<TrainedModel> {
        match self {
            TrainedModel::TwoStage { point, .. } => Some(TrainedModel::ConstSigma {
                point: point.clone(),
            }),
            _ => None,
        }
    }
}

/// Trains `method` on standardized data. See [`train_with`] for a variant
/// with an epoch callback.
pub fn train(
    method: Method,
    x: &Matrix,
    y: &[f64],
    config: &TrainConfig,
) -> Result<(TrainedModel, TrainReport)> {
    train_with(method, x, y, config, |_| {})
}

/// Trains `method`, invoking `on_epoch` after every completed epoch.
pub fn train_with(
    method: Method,
    x: &Matrix,
    y: &[f64],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainedModel, TrainReport)> {
    config.validate()?;
    if x.rows() == 0 {
        return Err(Error::Contract("cannot train on an empty dataset".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::Contract(format!(
            "target length {} does not match {} design rows",
            y.len(),
            x.rows()
        )));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(config.stream);
    let mut result = match method {
        Method::Doicr => train_doicr(x, y, config, &mut rng, &mut on_epoch),
        Method::Scpo | Method::QdSoft => {
            train_batch_loss(method, x, y, config, &mut rng, &mut on_epoch)
        }
        Method::Traditional => train_traditional(x, y, config, &mut rng, &mut on_epoch),
    }?;
    result.1.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(result)
}

fn gather(x: &Matrix, y: &[f64], rows: &[usize]) -> (Matrix, Vec<f64>) {
    let xs = Matrix::from_fn(rows.len(), x.cols(), |i, j| x.get(rows[i], j));
    let ys = rows.iter().map(|&i| y[i]).collect();
    (xs, ys)
}

/// Batch boundaries over `n` examples: full batches of `batch` with any
/// remainder merged into the final batch.
fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + batch <= n {
        out.push((start, start + batch));
        start += batch;
    }
    if start < n {
        match out.last_mut() {
            Some(last) => last.1 = n,
            None => out.push((0, n)),
        }
    }
    out
}

fn slot_gradients(
    params: &ModelParams,
    handles: &[crate::diff::Value],
    grads: &crate::diff::Gradients,
) -> Vec<Matrix> {
    params
        .slots()
        .iter()
        .zip(handles)
        .map(|(slot, &h)| grads.wrt_or_zeros(h, slot.rows(), slot.cols()))
        .collect()
}

/// Order-independent hash of a partition's membership.
fn fingerprint(indices: &[usize]) -> String {
    let mut sorted: Vec<u64> = indices.iter().map(|&i| i as u64).collect();
    sorted.sort_unstable();
    let mut hasher = Sha256::new();
    for i in sorted {
        hasher.update(i.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Re-labels tape-level non-finiteness with the training position so a
/// diverging run says where it died.
fn loss_context(err: Error, method: Method, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { op, detail } => Error::NonFiniteLoss {
            method: method.to_string(),
            epoch,
            batch,
            detail: match detail {
                Some(d) => format!("{op}: {d}"),
                None => op.to_string(),
            },
        },
        other => other,
    }
}

/// Coverage and width of the current conformal intervals, scored on `eval`
/// rows with the quantile taken from `cal` rows.
fn ms_diagnostics(
    params: &ModelParams,
    x: &Matrix,
    y: &[f64],
    eval_rows: &[usize],
    cal_rows: &[usize],
    epsilon: f64,
) -> Result<(f64, f64, f64)> {
    let (cx, cy) = gather(x, y, cal_rows);
    let (m, sigma) = evaluate(params, &cx)?.m_sigma()?;
    let alphas = conformal::ncm_scores(&cy, &m, &sigma)?;
    let sel = conformal::conformal_quantile(alphas.as_slice(), epsilon)?;
    let (ex, ey) = gather(x, y, eval_rows);
    let (m, sigma) = evaluate(params, &ex)?.m_sigma()?;
    let intervals = conformal::predict_intervals(&m, &sigma, sel.q)?;
    Ok((
        metrics::picp(&intervals, &ey),
        metrics::mpiw(&intervals),
        sel.q,
    ))
}

fn train_doicr(
    x: &Matrix,
    y: &[f64],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    on_epoch: &mut impl FnMut(&EpochRecord),
) -> Result<(TrainedModel, TrainReport)> {
    let net = NetConfig::new(x.cols()).with_hidden(config.hidden.clone());
    let mut params = ModelParams::init(&net, rng.next_u64())?;
    let mut opt = Optimizer::new(config.optimizer, config.lr, config.weight_decay, &params)?;

    let n = x.rows();
    let n_cal = (config.r * n as f64).floor() as usize;
    if n_cal == 0 || n_cal == n {
        return Err(Error::Config(format!(
            "cannot carve an embedded calibration part of fraction {} out of {n} examples",
            config.r
        )));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    let mut frozen: Option<(Vec<usize>, Vec<usize>)> = None;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut clipped = 0usize;

    for epoch in 0..config.epochs {
        let (d1, d2) = match &frozen {
            Some((d1, d2)) => (d1.clone(), d2.clone()),
            None => {
                pool.shuffle(rng);
                let d2 = pool[..n_cal].to_vec();
                let d1 = pool[n_cal..].to_vec();
                if config.fixed_embedded_split {
                    frozen = Some((d1.clone(), d2.clone()));
                }
                (d1, d2)
            }
        };
        let (cal_x, cal_y) = gather(x, y, &d2);
        let cal_y = Matrix::column(&cal_y);
        let mut order = d1.clone();
        order.shuffle(rng);

        let mut epoch_loss = 0.0;
        let ranges = batch_ranges(order.len(), config.batch_size);
        let n_batches = ranges.len();
        for (b, (lo, hi)) in ranges.into_iter().enumerate() {
            let (bx, _) = gather(x, y, &order[lo..hi]);
            let mut tape = Tape::new();
            let tp = register_params(&mut tape, &params)?;
            let out = losses::embedded_icp_loss(
                &mut tape,
                &net,
                &tp,
                &bx,
                &cal_x,
                &cal_y,
                &config.loss,
            )
            .map_err(|e| loss_context(e, Method::Doicr, epoch, b))?;
            epoch_loss += tape.scalar_value(out.loss);
            let grads = tape
                .backward(out.loss)
                .map_err(|e| loss_context(e, Method::Doicr, epoch, b))?;
            let mut gs = slot_gradients(&params, &tp.slots(), &grads);
            if clip_global_norm(&mut gs, config.grad_clip) > config.grad_clip {
                clipped += 1;
            }
            opt.step(&mut params, &gs)?;
        }

        let (picp, mpiw, q) = ms_diagnostics(&params, x, y, &d1, &d2, config.loss.epsilon)?;
        let record = EpochRecord {
            epoch,
            loss: epoch_loss / n_batches as f64,
            train_picp: Some(picp),
            train_mpiw: Some(mpiw),
            q: Some(q),
            split_fingerprint: Some(fingerprint(&d2)),
        };
        on_epoch(&record);
        epochs.push(record);
    }

    Ok((
        TrainedModel::TwoHead { params },
        TrainReport {
            method: Method::Doicr,
            config: config.clone(),
            epochs,
            clipped_batches: clipped,
            wall_clock_secs: 0.0,
        },
    ))
}

fn train_batch_loss(
    method: Method,
    x: &Matrix,
    y: &[f64],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    on_epoch: &mut impl FnMut(&EpochRecord),
) -> Result<(TrainedModel, TrainReport)> {
    let net = NetConfig::new(x.cols())
        .with_hidden(config.hidden.clone())
        .with_head_mode(method.head_mode());
    let mut params = ModelParams::init(&net, rng.next_u64())?;
    let mut opt = Optimizer::new(config.optimizer, config.lr, config.weight_decay, &params)?;

    let n = x.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let all: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut clipped = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let ranges = batch_ranges(n, config.batch_size);
        let n_batches = ranges.len();
        for (b, (lo, hi)) in ranges.into_iter().enumerate() {
            let (bx, by) = gather(x, y, &order[lo..hi]);
            let by = Matrix::column(&by);
            let mut tape = Tape::new();
            let tp = register_params(&mut tape, &params)?;
            let loss = match method {
                Method::Scpo => {
                    losses::scpo_loss(&mut tape, &net, &tp, &bx, &by, &config.loss)
                        .map(|out| out.loss)
                }
                Method::QdSoft => {
                    losses::qd_soft_loss(&mut tape, &net, &tp, &bx, &by, &config.loss)
                        .map(|out| out.loss)
                }
                _ => unreachable!("train_batch_loss only handles scpo and qdsoft"),
            }
            .map_err(|e| loss_context(e, method, epoch, b))?;
            epoch_loss += tape.scalar_value(loss);
            let grads = tape
                .backward(loss)
                .map_err(|e| loss_context(e, method, epoch, b))?;
            let mut gs = slot_gradients(&params, &tp.slots(), &grads);
            if clip_global_norm(&mut gs, config.grad_clip) > config.grad_clip {
                clipped += 1;
            }
            opt.step(&mut params, &gs)?;
        }

        let record = match method {
            Method::Scpo => {
                let (picp, mpiw, q) =
                    ms_diagnostics(&params, x, y, &all, &all, config.loss.epsilon)?;
                EpochRecord {
                    epoch,
                    loss: epoch_loss / n_batches as f64,
                    train_picp: Some(picp),
                    train_mpiw: Some(mpiw),
                    q: Some(q),
                    split_fingerprint: None,
                }
            }
            _ => {
                let (lower, upper) = evaluate(&params, x)?.bounds()?;
                let intervals: Vec<PredictionInterval> = lower
                    .iter()
                    .zip(&upper)
                    .map(|(&lower, &upper)| PredictionInterval { lower, upper })
                    .collect();
                EpochRecord {
                    epoch,
                    loss: epoch_loss / n_batches as f64,
                    train_picp: Some(metrics::picp(&intervals, y)),
                    train_mpiw: Some(metrics::mpiw(&intervals)),
                    q: None,
                    split_fingerprint: None,
                }
            }
        };
        on_epoch(&record);
        epochs.push(record);
    }

    let model = match method {
        Method::Scpo => TrainedModel::TwoHead { params },
        _ => TrainedModel::Bounds { params },
    };
    Ok((
        model,
        TrainReport {
            method,
            config: config.clone(),
            epochs,
            clipped_batches: clipped,
            wall_clock_secs: 0.0,
        },
    ))
}

fn train_single_head(
    x: &Matrix,
    targets: &Matrix,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch_offset: usize,
    epochs: &mut Vec<EpochRecord>,
    clipped: &mut usize,
    on_epoch: &mut impl FnMut(&EpochRecord),
) -> Result<ModelParams> {
    let net = NetConfig::new(x.cols())
        .with_hidden(config.hidden.clone())
        .with_head_mode(HeadMode::Single);
    let mut params = ModelParams::init(&net, rng.next_u64())?;
    let mut opt = Optimizer::new(config.optimizer, config.lr, config.weight_decay, &params)?;
    let n = x.rows();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let ranges = batch_ranges(n, config.batch_size);
        let n_batches = ranges.len();
        for (b, (lo, hi)) in ranges.into_iter().enumerate() {
            let rows = &order[lo..hi];
            let bx = Matrix::from_fn(rows.len(), x.cols(), |i, j| x.get(rows[i], j));
            let bt = Matrix::from_fn(rows.len(), 1, |i, _| targets.get(rows[i], 0));
            let mut tape = Tape::new();
            let tp = register_params(&mut tape, &params)?;
            let xv = tape.leaf(bx)?;
            let pred = match crate::network::forward(&mut tape, &net, &tp, xv)? {
                crate::network::HeadOutputs::Single { out } => out,
                _ => unreachable!("single-head net"),
            };
            let loss = losses::mse_loss(&mut tape, pred, &bt)
                .map_err(|e| loss_context(e, Method::Traditional, epoch_offset + epoch, b))?;
            epoch_loss += tape.scalar_value(loss);
            let grads = tape
                .backward(loss)
                .map_err(|e| loss_context(e, Method::Traditional, epoch_offset + epoch, b))?;
            let mut gs = slot_gradients(&params, &tp.slots(), &grads);
            if clip_global_norm(&mut gs, config.grad_clip) > config.grad_clip {
                *clipped += 1;
            }
            opt.step(&mut params, &gs)?;
        }
        let record = EpochRecord {
            epoch: epoch_offset + epoch,
            loss: epoch_loss / n_batches as f64,
            train_picp: None,
            train_mpiw: None,
            q: None,
            split_fingerprint: None,
        };
        on_epoch(&record);
        epochs.push(record);
    }
    Ok(params)
}

fn train_traditional(
    x: &Matrix,
    y: &[f64],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    on_epoch: &mut impl FnMut(&EpochRecord),
) -> Result<(TrainedModel, TrainReport)> {
    let mut epochs = Vec::with_capacity(2 * config.epochs);
    let mut clipped = 0usize;
    let targets = Matrix::column(y);
    let point = train_single_head(
        x,
        &targets,
        config,
        rng,
        0,
        &mut epochs,
        &mut clipped,
        on_epoch,
    )?;

    let m = evaluate(&point, x)?.single()?;
    let spread_targets = losses::log_residual_targets(y, &m)?;
    let spread = train_single_head(
        x,
        &spread_targets,
        config,
        rng,
        config.epochs,
        &mut epochs,
        &mut clipped,
        on_epoch,
    )?;

    Ok((
        TrainedModel::TwoStage { point, spread },
        TrainReport {
            method: Method::Traditional,
            config: config.clone(),
            epochs,
            clipped_batches: clipped,
            wall_clock_secs: 0.0,
        },
    ))
}

/// Split conformal evaluation of a score-based model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IcpEvaluation {
    pub quantile: ConformalQuantile,
    pub metrics: IntervalMetrics,
    /// True when the calibration set was too small for a finite quantile,
    /// making every interval the whole real line.
    pub unbounded: bool,
    pub intervals: Vec<PredictionInterval>,
}

/// Calibrates `model` on one held-out set and scores its intervals on
/// another. All inputs are in standardized units.
pub fn calibrate_and_test(
    model: &TrainedModel,
    cal_x: &Matrix,
    cal_y: &[f64],
    test_x: &Matrix,
    test_y: &[f64],
    epsilon: f64,
) -> Result<IcpEvaluation> {
    let (m, sigma) = model.point_and_scale(cal_x)?;
    let alphas = conformal::ncm_scores(cal_y, &m, &sigma)?;
    let quantile = conformal::conformal_quantile(alphas.as_slice(), epsilon)?;
    let (m, sigma) = model.point_and_scale(test_x)?;
    let intervals = conformal::predict_intervals(&m, &sigma, quantile.q)?;
    let metrics = metrics::interval_metrics(&intervals, test_y);
    Ok(IcpEvaluation {
        quantile,
        unbounded: !quantile.q.is_finite(),
        metrics,
        intervals,
    })
}

/// Scores a bound network's raw intervals on a test set, returning the
/// metrics and how many intervals were crossed (upper below lower).
pub fn test_direct_bounds(
    model: &TrainedModel,
    test_x: &Matrix,
    test_y: &[f64],
) -> Result<(IntervalMetrics, usize, Vec<PredictionInterval>)> {
    let (lower, upper) = model.bounds(test_x)?;
    let intervals: Vec<PredictionInterval> = lower
        .iter()
        .zip(&upper)
        .map(|(&lower, &upper)| PredictionInterval { lower, upper })
        .collect();
    let crossed = intervals.iter().filter(|iv| iv.is_crossed()).count();
    let metrics = metrics::interval_metrics(&intervals, test_y);
    Ok((metrics, crossed, intervals))
}

/// One hyperparameter combination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

/// The standard 48-point grid: four learning rates, three decays, four
/// batch sizes.
pub fn default_grid() -> Vec<GridPoint> {
    let mut grid = Vec::with_capacity(48);
    for &lr in &[1e-4, 1e-3, 1e-2, 1e-1] {
        for &weight_decay in &[0.0, 1e-4, 1e-3] {
            for &batch_size in &[16usize, 32, 64, 128] {
                grid.push(GridPoint {
                    lr,
                    weight_decay,
                    batch_size,
                });
            }
        }
    }
    grid
}

/// What happened at one grid point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridOutcome {
    pub index: usize,
    pub point: GridPoint,
    pub validation_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct GridSearchResult {
    pub best_index: usize,
    pub point: GridPoint,
    pub model: TrainedModel,
    pub report: TrainReport,
    pub outcomes: Vec<GridOutcome>,
}

/// True when candidate `a` should be preferred over `b`: lower validation
/// loss, ties broken toward the smaller learning rate, then the smaller
/// batch.
fn better_candidate(a: (f64, GridPoint), b: (f64, GridPoint)) -> bool {
    if a.0 != b.0 {
        return a.0 < b.0;
    }
    if a.1.lr != b.1.lr {
        return a.1.lr < b.1.lr;
    }
    a.1.batch_size < b.1.batch_size
}

/// Validation objective for the grid: each method scores the validation set
/// with its own training loss (point MSE for the two-stage baseline; the
/// embedded loss splits the validation set once, identically for every grid
/// point).
fn validation_loss(
    method: Method,
    model: &TrainedModel,
    val_x: &Matrix,
    val_y: &[f64],
    config: &TrainConfig,
    embedded_split: Option<&(Vec<usize>, Vec<usize>)>,
) -> Result<f64> {
    let y_col = Matrix::column(val_y);
    match (method, model) {
        (Method::Doicr, TrainedModel::TwoHead { params }) => {
            let (v1, v2) = embedded_split.expect("doicr grid search prepares a split");
            let (bx, _) = gather(val_x, val_y, v1);
            let (cx, cy) = gather(val_x, val_y, v2);
            let cy = Matrix::column(&cy);
            let mut tape = Tape::new();
            let tp = register_params(&mut tape, params)?;
            let net = &params.config;
            let out = losses::embedded_icp_loss(&mut tape, net, &tp, &bx, &cx, &cy, &config.loss)?;
            Ok(tape.scalar_value(out.loss))
        }
        (Method::Scpo, TrainedModel::TwoHead { params }) => {
            let mut tape = Tape::new();
            let tp = register_params(&mut tape, params)?;
            let out =
                losses::scpo_loss(&mut tape, &params.config, &tp, val_x, &y_col, &config.loss)?;
            Ok(tape.scalar_value(out.loss))
        }
        (Method::QdSoft, TrainedModel::Bounds { params }) => {
            let mut tape = Tape::new();
            let tp = register_params(&mut tape, params)?;
            let out =
                losses::qd_soft_loss(&mut tape, &params.config, &tp, val_x, &y_col, &config.loss)?;
            Ok(tape.scalar_value(out.loss))
        }
        (Method::Traditional, TrainedModel::TwoStage { point, .. }) => {
            let m = evaluate(point, val_x)?.single()?;
            let mse = m
                .iter()
                .zip(val_y)
                .map(|(m, y)| (m - y) * (m - y))
                .sum::<f64>()
                / val_y.len() as f64;
            Ok(mse)
        }
        _ => Err(Error::Contract(
            "trained model does not match the grid-search method".into(),
        )),
    }
}

/// Trains every grid point and keeps the one with the best validation loss.
///
/// Each point trains with its own generator stream (the point's index) so
/// runs sharing `config.seed` stay decorrelated but reproducible. Points
/// that fail to train or produce a non-finite validation loss are recorded
/// and skipped; if every point fails the whole search errors with the
/// per-point diagnostics.
pub fn grid_search(
    method: Method,
    x: &Matrix,
    y: &[f64],
    val_x: &Matrix,
    val_y: &[f64],
    config: &TrainConfig,
    grid: &[GridPoint],
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::Config("grid search needs at least one point".into()));
    }
    if val_x.rows() == 0 || val_x.rows() != val_y.len() {
        return Err(Error::Contract(format!(
            "validation set is {} rows against {} targets",
            val_x.rows(),
            val_y.len()
        )));
    }

    let embedded_split = if method == Method::Doicr {
        let n = val_x.rows();
        let n_cal = (config.r * n as f64).floor() as usize;
        if n_cal == 0 || n_cal == n {
            return Err(Error::Config(format!(
                "validation set of {n} is too small for an embedded split at r = {}",
                config.r
            )));
        }
        let mut pool: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        pool.shuffle(&mut rng);
        let v2 = pool[..n_cal].to_vec();
        let v1 = pool[n_cal..].to_vec();
        Some((v1, v2))
    } else {
        None
    };

    let mut outcomes = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, GridPoint, usize, TrainedModel, TrainReport)> = None;
    for (index, point) in grid.iter().enumerate() {
        let mut point_config = config.clone();
        point_config.lr = point.lr;
        point_config.weight_decay = point.weight_decay;
        point_config.batch_size = point.batch_size;
        point_config.stream = index as u64;

        let attempt = train(method, x, y, &point_config).and_then(|(model, report)| {
            let loss = validation_loss(
                method,
                &model,
                val_x,
                val_y,
                &point_config,
                embedded_split.as_ref(),
            )?;
            if !loss.is_finite() {
                return Err(Error::Config(format!(
                    "validation loss is not finite ({loss})"
                )));
            }
            Ok((loss, model, report))
        });
        match attempt {
            Ok((loss, model, report)) => {
                outcomes.push(GridOutcome {
                    index,
                    point: *point,
                    validation_loss: Some(loss),
                    error: None,
                });
                let replace = match &best {
                    Some((best_loss, best_point, ..)) => {
                        better_candidate((loss, *point), (*best_loss, *best_point))
                    }
                    None => true,
                };
                if replace {
                    best = Some((loss, *point, index, model, report));
                }
            }
            Err(err) => outcomes.push(GridOutcome {
                index,
                point: *point,
                validation_loss: None,
                error: Some(err.to_string()),
            }),
        }
    }

    match best {
        Some((_, point, best_index, model, report)) => Ok(GridSearchResult {
            best_index,
            point,
            model,
            report,
            outcomes,
        }),
        None => Err(Error::GridExhausted {
            count: grid.len(),
            diagnostics: outcomes
                .iter()
                .map(|o| {
                    format!(
                        "lr {}, wd {}, batch {}: {}",
                        o.point.lr,
                        o.point.weight_decay,
                        o.point.batch_size,
                        o.error.as_deref().unwrap_or("unknown failure")
                    )
                })
                .collect(),
        }),
    }
}

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// A trained model with everything needed to predict on raw inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format_version: u32,
    pub method: Method,
    /// Miscoverage rate the model was trained against.
    pub epsilon: f64,
    pub model: TrainedModel,
    pub standardization: Standardization,
}

impl ModelBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let bundle: ModelBundle =
            serde_json::from_str(&raw).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if bundle.format_version != BUNDLE_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "bundle format {} is not supported (expected {BUNDLE_FORMAT_VERSION})",
                bundle.format_version
            )));
        }
        Ok(bundle)
    }
}
