//! Shared-trunk multilayer perceptron with one or two linear output heads.
//!
//! The trunk is a stack of fully connected layers with a pointwise
//! nonlinearity. In `MS` mode the two heads emit a point estimate `m` and a
//! log-scale `s`, and the forward pass also exposes `sigma = exp(s)` with
//! `s` clamped to a safe band so the exponential cannot overflow. In
//! `LowerUpper` mode the heads are read directly as interval bounds and no
//! exponential is applied. `Single` mode (one head) serves the two-stage
//! baseline, which trains separate point and log-residual networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::diff::{Tape, Value};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Clamp band for the log-scale head: `sigma` stays within
/// `[exp(-15), exp(15)]`, roughly `3e-7` to `3.3e6`.
pub const S_CLAMP: f64 = 15.0;

/// Dampening applied to the log-scale head's initial weights so the network
/// starts out with `sigma` close to 1.
const S_HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Point estimate and log-scale heads (`m`, `s`).
    Ms,
    /// Direct interval bound heads (`lower`, `upper`).
    LowerUpper,
    /// One output head.
    Single,
}

impl HeadMode {
    pub fn n_heads(self) -> usize {
        match self {
            HeadMode::Ms | HeadMode::LowerUpper => 2,
            HeadMode::Single => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Hidden layer widths; may be empty, in which case the heads read the
    /// inputs directly.
    pub hidden: Vec<usize>,
    pub head_mode: HeadMode,
    pub activation: Activation,
}

impl NetConfig {
    /// Two hidden layers of 20 rectified units and `m`/`s` heads.
    pub fn new(input_dim: usize) -> Self {
        NetConfig {
            input_dim,
            hidden: vec![20, 20],
            head_mode: HeadMode::Ms,
            activation: Activation::Relu,
        }
    }

    pub fn with_head_mode(mut self, head_mode: HeadMode) -> Self {
        self.head_mode = head_mode;
        self
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden layer widths must be nonzero".into()));
        }
        Ok(())
    }

    /// Shapes of every parameter matrix in slot order: trunk `(w, b)` pairs
    /// from input to output, then one `(w, b)` pair per head.
    pub fn slot_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut prev = self.input_dim;
        for &width in &self.hidden {
            shapes.push((prev, width));
            shapes.push((1, width));
            prev = width;
        }
        for _ in 0..self.head_mode.n_heads() {
            shapes.push((prev, 1));
            shapes.push((1, 1));
        }
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.slot_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Weights and bias of one fully connected layer. The bias is a `1 x width`
/// row added to every example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Matrix,
    pub b: Matrix,
}

/// All trainable parameters of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: NetConfig,
    pub trunk: Vec<LayerParams>,
    pub heads: Vec<LayerParams>,
}

impl ModelParams {
    /// Draws fresh parameters: weights uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero, and the `s` head's
    /// weights additionally scaled by 0.1 in `Ms` mode.
    pub fn init(config: &NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw_layer = |fan_in: usize, width: usize, scale: f64| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let w = Matrix::from_fn(fan_in, width, |_, _| {
                scale * rng.random_range(-bound..bound)
            });
            LayerParams {
                w,
                b: Matrix::zeros(1, width),
            }
        };

        let mut trunk = Vec::with_capacity(config.hidden.len());
        let mut prev = config.input_dim;
        for &width in &config.hidden {
            trunk.push(draw_layer(prev, width, 1.0));
            prev = width;
        }
        let mut heads = Vec::with_capacity(config.head_mode.n_heads());
        for k in 0..config.head_mode.n_heads() {
            let scale = if config.head_mode == HeadMode::Ms && k == 1 {
                S_HEAD_INIT_SCALE
            } else {
                1.0
            };
            heads.push(draw_layer(prev, 1, scale));
        }
        Ok(ModelParams {
            config: config.clone(),
            trunk,
            heads,
        })
    }

    /// Zero-valued parameters (useful as a degenerate reference model).
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let shapes = config.slot_shapes();
        let mut mats: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        let mut trunk = Vec::new();
        let mut rest = mats.split_off(0);
        for _ in 0..config.hidden.len() {
            let w = rest.remove(0);
            let b = rest.remove(0);
            trunk.push(LayerParams { w, b });
        }
        let mut heads = Vec::new();
        for _ in 0..config.head_mode.n_heads() {
            let w = rest.remove(0);
            let b = rest.remove(0);
            heads.push(LayerParams { w, b });
        }
        Ok(ModelParams {
            config: config.clone(),
            trunk,
            heads,
        })
    }

    pub fn n_params(&self) -> usize {
        self.config.n_params()
    }

    /// Parameter matrices in slot order (matching [`NetConfig::slot_shapes`]).
    pub fn slots(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for layer in self.trunk.iter().chain(&self.heads) {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out
    }

    pub fn slots_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for layer in self.trunk.iter_mut().chain(self.heads.iter_mut()) {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out
    }

    /// Concatenation of all parameters in slot order, row-major per slot.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for m in self.slots() {
            flat.extend_from_slice(m.as_slice());
        }
        flat
    }

    pub fn from_flat(config: &NetConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.n_params() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                config.n_params(),
                flat.len()
            )));
        }
        let mut params = ModelParams::zeros(config)?;
        let mut offset = 0;
        for slot in params.slots_mut() {
            let len = slot.len();
            slot.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(params)
    }
}

/// Tape handles for every parameter slot of a registered network.
#[derive(Clone, Debug)]
pub struct TapeParams {
    pub trunk: Vec<(Value, Value)>,
    pub heads: Vec<(Value, Value)>,
}

impl TapeParams {
    /// Handles in slot order, matching [`ModelParams::slots`].
    pub fn slots(&self) -> Vec<Value> {
        let mut out = Vec::new();
        for &(w, b) in self.trunk.iter().chain(&self.heads) {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Registers every parameter matrix as a leaf on `tape`.
pub fn register_params(tape: &mut Tape, params: &ModelParams) -> Result<TapeParams> {
    let mut trunk = Vec::with_capacity(params.trunk.len());
    for layer in &params.trunk {
        trunk.push((tape.leaf(layer.w.clone())?, tape.leaf(layer.b.clone())?));
    }
    let mut heads = Vec::with_capacity(params.heads.len());
    for layer in &params.heads {
        heads.push((tape.leaf(layer.w.clone())?, tape.leaf(layer.b.clone())?));
    }
    Ok(TapeParams { trunk, heads })
}

/// Builds tape parameters from one scalar leaf per coordinate, in flat slot
/// order. This is how gradient checks perturb a network coordinatewise.
pub fn assemble_tape_params(
    tape: &mut Tape,
    config: &NetConfig,
    leaves: &[Value],
) -> Result<TapeParams> {
    if leaves.len() != config.n_params() {
        return Err(Error::Contract(format!(
            "expected {} scalar leaves, got {}",
            config.n_params(),
            leaves.len()
        )));
    }
    let shapes = config.slot_shapes();
    let mut mats = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for (rows, cols) in shapes {
        let n = rows * cols;
        mats.push(tape.assemble(rows, cols, &leaves[offset..offset + n])?);
        offset += n;
    }
    let mut it = mats.into_iter();
    let mut trunk = Vec::new();
    for _ in 0..config.hidden.len() {
        let w = it.next().unwrap();
        let b = it.next().unwrap();
        trunk.push((w, b));
    }
    let mut heads = Vec::new();
    for _ in 0..config.head_mode.n_heads() {
        let w = it.next().unwrap();
        let b = it.next().unwrap();
        heads.push((w, b));
    }
    Ok(TapeParams { trunk, heads })
}

/// Head outputs of a forward pass, one column per quantity.
#[derive(Clone, Copy, Debug)]
pub enum HeadOutputs {
    /// `s` is the raw head output; `sigma = exp(clamp(s))` is strictly
    /// positive.
    Ms { m: Value, s: Value, sigma: Value },
    LowerUpper { lower: Value, upper: Value },
    Single { out: Value },
}

/// Runs the network on a `n x input_dim` batch already registered at `x`.
///
/// Biases broadcast across rows through an explicit ones-column product, so
/// the tape never needs elementwise broadcasting beyond scalars.
pub fn forward(
    tape: &mut Tape,
    config: &NetConfig,
    params: &TapeParams,
    x: Value,
) -> Result<HeadOutputs> {
    let batch = tape.value(x).rows();
    if tape.value(x).cols() != config.input_dim {
        return Err(Error::Contract(format!(
            "input has {} columns, network expects {}",
            tape.value(x).cols(),
            config.input_dim
        )));
    }
    let ones = tape.leaf(Matrix::filled(batch, 1, 1.0))?;
    let linear = |tape: &mut Tape, h: Value, w: Value, b: Value| -> Result<Value> {
        let z = tape.matmul(h, w)?;
        let bias = tape.matmul(ones, b)?;
        tape.add(z, bias)
    };

    let mut h = x;
    for &(w, b) in &params.trunk {
        let z = linear(tape, h, w, b)?;
        h = match config.activation {
            Activation::Relu => tape.relu(z)?,
            Activation::Sigmoid => tape.sigmoid(z)?,
        };
    }

    let mut head_out = Vec::with_capacity(params.heads.len());
    for &(w, b) in &params.heads {
        head_out.push(linear(tape, h, w, b)?);
    }

    Ok(match config.head_mode {
        HeadMode::Ms => {
            let m = head_out[0];
            let s = head_out[1];
            let clamped = tape.clamp(s, -S_CLAMP, S_CLAMP)?;
            let sigma = tape.exp(clamped)?;
            HeadOutputs::Ms { m, s, sigma }
        }
        HeadMode::LowerUpper => HeadOutputs::LowerUpper {
            lower: head_out[0],
            upper: head_out[1],
        },
        HeadMode::Single => HeadOutputs::Single { out: head_out[0] },
    })
}

/// Plain-number outputs of a forward pass without gradient bookkeeping.
#[derive(Clone, Debug)]
pub enum NetOutputs {
    Ms {
        m: Vec<f64>,
        s: Vec<f64>,
        sigma: Vec<f64>,
    },
    LowerUpper {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    Single {
        out: Vec<f64>,
    },
}

impl NetOutputs {
    /// Point estimate and scale, for interval construction. Errors for
    /// bound-head networks.
    pub fn m_sigma(self) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            NetOutputs::Ms { m, sigma, .. } => Ok((m, sigma)),
            _ => Err(Error::Contract(
                "network does not expose point/scale heads".into(),
            )),
        }
    }

    pub fn bounds(self) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            NetOutputs::LowerUpper { lower, upper } => Ok((lower, upper)),
            _ => Err(Error::Contract(
                "network does not expose bound heads".into(),
            )),
        }
    }

    pub fn single(self) -> Result<Vec<f64>> {
        match self {
            NetOutputs::Single { out } => Ok(out),
            _ => Err(Error::Contract("network has more than one head".into())),
        }
    }
}

/// Evaluates the network on a batch, reusing the tape machinery so the
/// arithmetic is identical to the training path.
pub fn evaluate(params: &ModelParams, x: &Matrix) -> Result<NetOutputs> {
    let mut tape = Tape::new();
    let tp = register_params(&mut tape, params)?;
    let xv = tape.leaf(x.clone())?;
    let out = forward(&mut tape, &params.config, &tp, xv)?;
    let col = |tape: &Tape, v: Value| tape.value(v).as_slice().to_vec();
    Ok(match out {
        HeadOutputs::Ms { m, s, sigma } => NetOutputs::Ms {
            m: col(&tape, m),
            s: col(&tape, s),
            sigma: col(&tape, sigma),
        },
        HeadOutputs::LowerUpper { lower, upper } => NetOutputs::LowerUpper {
            lower: col(&tape, lower),
            upper: col(&tape, upper),
        },
        HeadOutputs::Single { out } => NetOutputs::Single {
            out: col(&tape, out),
        },
    })
}

/// On-disk parameter bundle. `format_version` gates forward compatibility;
/// the payload is the full configuration plus every layer matrix.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    model: ModelParams,
}

const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        model: params.clone(),
    };
    let json = serde_json::to_string_pretty(&checkpoint)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {CHECKPOINT_VERSION})",
            checkpoint.format_version
        )));
    }
    let model = checkpoint.model;
    let shapes = model.config.slot_shapes();
    let actual: Vec<(usize, usize)> = model
        .slots()
        .iter()
        .map(|m| (m.rows(), m.cols()))
        .collect();
    if shapes != actual {
        return Err(Error::Checkpoint(
            "layer shapes do not match the embedded configuration".into(),
        ));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{check_gradient, GradCheck};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count_matches_layer_arithmetic() {
        // 24 inputs through [20, 20] with two heads:
        // 24*20+20 + 20*20+20 + 20*2+2 = 962.
        let config = NetConfig::new(24);
        assert_eq!(config.n_params(), 962);
        let params = ModelParams::init(&config, 3).unwrap();
        assert_eq!(params.to_flat().len(), 962);
    }

    #[test]
    fn forward_matches_hand_computed_small_net() {
        // One hidden layer of 2 relu units on 3 inputs, m/s heads.
        let config = NetConfig {
            input_dim: 3,
            hidden: vec![2],
            head_mode: HeadMode::Ms,
            activation: Activation::Relu,
        };
        let mut params = ModelParams::zeros(&config).unwrap();
        params.trunk[0].w =
            Matrix::from_vec(3, 2, vec![0.5, -1.0, 1.0, 0.25, -0.5, 2.0]).unwrap();
        params.trunk[0].b = Matrix::from_vec(1, 2, vec![0.1, -0.2]).unwrap();
        params.heads[0].w = Matrix::from_vec(2, 1, vec![1.5, -0.5]).unwrap();
        params.heads[0].b = Matrix::from_vec(1, 1, vec![0.3]).unwrap();
        params.heads[1].w = Matrix::from_vec(2, 1, vec![0.2, 0.4]).unwrap();
        params.heads[1].b = Matrix::from_vec(1, 1, vec![-0.1]).unwrap();

        let x = Matrix::from_vec(2, 3, vec![1.0, 2.0, -1.0, 0.0, -1.0, 0.5]).unwrap();
        let (m, s, sigma) = match evaluate(&params, &x).unwrap() {
            NetOutputs::Ms { m, s, sigma } => (m, s, sigma),
            _ => unreachable!(),
        };

        // Recompute with scalar arithmetic.
        for (row, (m_got, (s_got, sigma_got))) in
            (0..2).zip(m.iter().zip(s.iter().zip(&sigma)))
        {
            let xr = x.row(row);
            let mut h = [0.0f64; 2];
            for j in 0..2 {
                let mut z = params.trunk[0].b.get(0, j);
                for (i, &xi) in xr.iter().enumerate() {
                    z += xi * params.trunk[0].w.get(i, j);
                }
                h[j] = z.max(0.0);
            }
            let m_exp = h[0] * 1.5 + h[1] * -0.5 + 0.3;
            let s_exp = h[0] * 0.2 + h[1] * 0.4 - 0.1;
            assert!((m_got - m_exp).abs() < 1e-12);
            assert!((s_got - s_exp).abs() < 1e-12);
            assert!((sigma_got - s_exp.clamp(-S_CLAMP, S_CLAMP).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_sigma_stays_near_one() {
        let config = NetConfig::new(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..100u64 {
            let params = ModelParams::init(&config, seed).unwrap();
            let x = Matrix::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
            let (_, sigma) = evaluate(&params, &x).unwrap().m_sigma().unwrap();
            for s in sigma {
                assert!(s > 0.0);
                assert!((0.5..2.0).contains(&s), "initial sigma {s} drifted");
            }
        }
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let config = NetConfig::new(7);
        let a = ModelParams::init(&config, 42).unwrap();
        let b = ModelParams::init(&config, 42).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&config, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let config = NetConfig {
            input_dim: 3,
            hidden: vec![4, 3],
            head_mode: HeadMode::Ms,
            activation: Activation::Relu,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));

        for target in ["m", "s"] {
            let mut scored = false;
            for attempt in 0..20 {
                let point = ModelParams::init(&config, 100 + attempt).unwrap().to_flat();
                let check = check_gradient(
                    |tape, leaves| {
                        let tp = assemble_tape_params(tape, &config, leaves)?;
                        let xv = tape.leaf(x.clone())?;
                        match forward(tape, &config, &tp, xv)? {
                            HeadOutputs::Ms { m, s, .. } => {
                                tape.mean(if target == "m" { m } else { s })
                            }
                            _ => unreachable!(),
                        }
                    },
                    &point,
                    1e-5,
                )
                .unwrap();
                if let GradCheck::Scored { max_rel_err } = check {
                    assert!(
                        max_rel_err < 1e-5,
                        "mean({target}) gradient error {max_rel_err:e}"
                    );
                    scored = true;
                    break;
                }
            }
            assert!(scored, "no smooth evaluation point found for {target}");
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let config = NetConfig::new(4).with_hidden(vec![6, 5]);
        let params = ModelParams::init(&config, 9).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(params.to_flat(), loaded.to_flat());
    }

    #[test]
    fn checkpoint_rejects_corrupt_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        std::fs::write(&path, "{\"format_version\": 1}").unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            Error::Checkpoint(_)
        ));

        let config = NetConfig::new(3);
        let params = ModelParams::init(&config, 1).unwrap();
        save_checkpoint(&params, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&path, text).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Checkpoint(msg) => assert!(msg.contains("version")),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn flat_round_trip_preserves_parameters() {
        let config = NetConfig::new(3).with_head_mode(HeadMode::LowerUpper);
        let params = ModelParams::init(&config, 77).unwrap();
        let flat = params.to_flat();
        let back = ModelParams::from_flat(&config, &flat).unwrap();
        assert_eq!(params, back);
        assert!(ModelParams::from_flat(&config, &flat[1..]).is_err());
    }

    #[test]
    fn single_head_mode_emits_one_column() {
        let config = NetConfig::new(2)
            .with_hidden(vec![3])
            .with_head_mode(HeadMode::Single);
        let params = ModelParams::init(&config, 0).unwrap();
        let x = Matrix::from_fn(5, 2, |i, j| (i + j) as f64 * 0.1);
        let out = evaluate(&params, &x).unwrap().single().unwrap();
        assert_eq!(out.len(), 5);
    }
}
