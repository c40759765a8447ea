//! Conformal regression with directly optimized interval width.
//!
//! The crate trains a shared-trunk two-head network (point estimate `m` and
//! log-scale `s`) by gradient descent directly on the width of the prediction
//! intervals an inductive conformal predictor would emit, re-splitting the
//! proper-training/calibration folds every epoch (DOICR). Alongside it live
//! the baselines the method is usually compared against: a traditional
//! two-stage ICP, the QD-soft direct interval loss, and the SCPO surrogate
//! objective. A benchmark harness measures empirical coverage (PICP) and
//! mean interval width (MPIW) under a fixed split-and-seed protocol.

pub mod bench;
pub mod conformal;
pub mod data;
pub mod diff;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod network;
pub mod report;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
