//! Benchmark sweeps: train, calibrate and score every requested method at
//! every confidence level and seed, collecting one record per run.
//!
//! A sweep never aborts on a failing run; the failure is recorded next to
//! the successful rows so a long sweep survives a diverging configuration.
//! Records serialize to JSON lines and CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_splits, Dataset, SplitScheme};
use crate::error::{Error, Result};
use crate::trainer::{self, Method, TrainConfig};

/// A run is flagged when its empirical coverage strays further than this
/// from the nominal level.
pub const DEFAULT_PICP_TOLERANCE: f64 = 0.02;

/// What the benchmark evaluates. This is one level above
/// [`trainer::Method`]: the two ICP baselines share a training method and
/// differ in how the trained model is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMethod {
    /// Two-head network trained on the embedded-calibration loss, then
    /// conformally calibrated on held-out data.
    Doicr,
    /// Two-stage point/spread networks with conformal calibration.
    Icp,
    /// The same point network with unit scale, the non-normalized baseline.
    IcpConst,
    /// Two-head network trained on the surrogate coverage loss.
    Scpo,
    /// Bound network scored on its raw intervals, no calibration.
    Qdsoft,
}

impl BenchMethod {
    pub fn all() -> [BenchMethod; 5] {
        [
            BenchMethod::Doicr,
            BenchMethod::Icp,
            BenchMethod::IcpConst,
            BenchMethod::Scpo,
            BenchMethod::Qdsoft,
        ]
    }

    pub fn scheme(self) -> SplitScheme {
        match self {
            BenchMethod::Qdsoft => SplitScheme::QdSoft,
            _ => SplitScheme::IcpFamily,
        }
    }

    fn train_method(self) -> Method {
        match self {
            BenchMethod::Doicr => Method::Doicr,
            BenchMethod::Icp | BenchMethod::IcpConst => Method::Traditional,
            BenchMethod::Scpo => Method::Scpo,
            BenchMethod::Qdsoft => Method::QdSoft,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchMethod::Doicr => "doicr",
            BenchMethod::Icp => "icp",
            BenchMethod::IcpConst => "icp-const",
            BenchMethod::Scpo => "scpo",
            BenchMethod::Qdsoft => "qdsoft",
        }
    }
}

impl std::fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "doicr" => Ok(BenchMethod::Doicr),
            "icp" => Ok(BenchMethod::Icp),
            "icp-const" | "icp_const" => Ok(BenchMethod::IcpConst),
            "scpo" => Ok(BenchMethod::Scpo),
            "qdsoft" | "qd_soft" => Ok(BenchMethod::Qdsoft),
            other => Err(Error::Config(format!(
                "unknown benchmark method {other:?}; expected doicr, icp, \
                 icp-const, scpo or qdsoft"
            ))),
        }
    }
}

/// Sweep definition: the cartesian product of methods, confidence levels
/// and seeds, all trained with the same base configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchConfig {
    pub dataset_name: String,
    pub methods: Vec<BenchMethod>,
    pub confidence_levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub picp_tolerance: f64,
    /// Report widths in the target's original units instead of
    /// standardized ones.
    pub raw_mpiw: bool,
}

impl BenchConfig {
    pub fn new(dataset_name: impl Into<String>) -> Self {
        BenchConfig {
            dataset_name: dataset_name.into(),
            methods: BenchMethod::all().to_vec(),
            confidence_levels: vec![0.9],
            seeds: vec![0],
            train: TrainConfig::default(),
            picp_tolerance: DEFAULT_PICP_TOLERANCE,
            raw_mpiw: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("benchmark needs at least one method".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("benchmark needs at least one seed".into()));
        }
        if self.confidence_levels.is_empty() {
            return Err(Error::Config(
                "benchmark needs at least one confidence level".into(),
            ));
        }
        for &cl in &self.confidence_levels {
            if !(cl > 0.0 && cl < 1.0) {
                return Err(Error::Config(format!(
                    "confidence levels must lie strictly between 0 and 1, got {cl}"
                )));
            }
        }
        if !(self.picp_tolerance > 0.0) {
            return Err(Error::Config(format!(
                "picp_tolerance must be positive, got {}",
                self.picp_tolerance
            )));
        }
        Ok(())
    }
}

/// Quality flags attached to a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFlags {
    /// Empirical coverage deviates from the nominal level by more than the
    /// configured tolerance.
    pub coverage_deviation: bool,
    /// The calibration set was too small for a finite quantile.
    pub unbounded_intervals: bool,
    /// Intervals whose upper bound fell below the lower one (bound
    /// networks only).
    pub crossed_bounds: usize,
}

/// One benchmark run: a method trained at one seed and scored at one
/// confidence level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub dataset: String,
    pub method: String,
    pub confidence_level: f64,
    pub seed: u64,
    pub picp: f64,
    /// Mean width, absent when the intervals were unbounded.
    pub mpiw: Option<f64>,
    pub n_test: usize,
    pub flags: RunFlags,
    /// Hash of the effective training configuration, for matching rows to
    /// replays.
    pub config_fingerprint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchFailure {
    pub method: String,
    pub confidence_level: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct BenchOutcome {
    pub records: Vec<BenchmarkRecord>,
    pub failures: Vec<BenchFailure>,
}

impl BenchOutcome {
    pub fn all_ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn config_fingerprint(method: BenchMethod, cl: f64, config: &TrainConfig) -> Result<String> {
    let payload = serde_json::to_vec(&(method, cl, config))?;
    let digest = Sha256::digest(&payload);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

fn run_single(
    data: &Dataset,
    cfg: &BenchConfig,
    method: BenchMethod,
    cl: f64,
    seed: u64,
) -> Result<BenchmarkRecord> {
    let epsilon = 1.0 - cl;
    let splits = make_splits(data.len(), method.scheme(), seed)?;
    let (std_data, std) = data.standardize(&splits.train)?;
    let (train_x, train_y) = std_data.select(&splits.train);

    let mut config = cfg.train.clone();
    config.seed = seed;
    config.stream = 0;
    config.loss.epsilon = epsilon;
    let fingerprint = config_fingerprint(method, cl, &config)?;

    let (model, _) = trainer::train(method.train_method(), &train_x, &train_y, &config)?;
    let (test_x, test_y) = std_data.select(&splits.test);

    let unit = if cfg.raw_mpiw { std.target_scale() } else { 1.0 };
    let (picp, mpiw, n_test, flags) = match method {
        BenchMethod::Qdsoft => {
            let (metrics, crossed, _) = trainer::test_direct_bounds(&model, &test_x, &test_y)?;
            (
                metrics.picp,
                Some(metrics.mpiw * unit),
                metrics.n,
                RunFlags {
                    coverage_deviation: (metrics.picp - cl).abs() > cfg.picp_tolerance,
                    unbounded_intervals: false,
                    crossed_bounds: crossed,
                },
            )
        }
        _ => {
            let model = match method {
                BenchMethod::IcpConst => model
                    .const_sigma_view()
                    .ok_or_else(|| Error::Contract("expected a two-stage model".into()))?,
                _ => model,
            };
            let (cal_x, cal_y) = std_data.select(&splits.cal);
            let eval =
                trainer::calibrate_and_test(&model, &cal_x, &cal_y, &test_x, &test_y, epsilon)?;
            let mpiw = if eval.unbounded {
                None
            } else {
                Some(eval.metrics.mpiw * unit)
            };
            (
                eval.metrics.picp,
                mpiw,
                eval.metrics.n,
                RunFlags {
                    coverage_deviation: (eval.metrics.picp - cl).abs() > cfg.picp_tolerance,
                    unbounded_intervals: eval.unbounded,
                    crossed_bounds: 0,
                },
            )
        }
    };

    Ok(BenchmarkRecord {
        dataset: cfg.dataset_name.clone(),
        method: method.name().to_string(),
        confidence_level: cl,
        seed,
        picp,
        mpiw,
        n_test,
        flags,
        config_fingerprint: fingerprint,
    })
}

/// Runs the full sweep in a fixed order (methods, then confidence levels,
/// then seeds). Individual run failures land in
/// [`BenchOutcome::failures`]; only malformed sweep definitions error out.
pub fn run_benchmark(data: &Dataset, cfg: &BenchConfig) -> Result<BenchOutcome> {
    cfg.validate()?;
    let mut outcome = BenchOutcome::default();
    for &method in &cfg.methods {
        for &cl in &cfg.confidence_levels {
            for &seed in &cfg.seeds {
                match run_single(data, cfg, method, cl, seed) {
                    Ok(record) => outcome.records.push(record),
                    Err(err) => outcome.failures.push(BenchFailure {
                        method: method.name().to_string(),
                        confidence_level: cl,
                        seed,
                        error: err.to_string(),
                    }),
                }
            }
        }
    }
    Ok(outcome)
}

/// One JSON object per line, in sweep order.
pub fn write_jsonl(path: &Path, records: &[BenchmarkRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<BenchmarkRecord>> {
    let raw = std::fs::read_to_string(path)?;
    raw.lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| serde_json::from_str(line).map_err(Error::from))
        .collect()
}

/// Flat CSV with one row per record; an unbounded width is an empty cell.
pub fn write_csv(path: &Path, records: &[BenchmarkRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "dataset",
        "method",
        "confidence_level",
        "seed",
        "picp",
        "mpiw",
        "n_test",
        "coverage_deviation",
        "unbounded_intervals",
        "crossed_bounds",
        "config_fingerprint",
    ])?;
    for r in records {
        writer.write_record([
            r.dataset.as_str(),
            r.method.as_str(),
            &r.confidence_level.to_string(),
            &r.seed.to_string(),
            &r.picp.to_string(),
            &r.mpiw.map(|w| w.to_string()).unwrap_or_default(),
            &r.n_test.to_string(),
            &r.flags.coverage_deviation.to_string(),
            &r.flags.unbounded_intervals.to_string(),
            &r.flags.crossed_bounds.to_string(),
            r.config_fingerprint.as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_heteroscedastic;
    use crate::losses::LossConfig;

    fn quick_bench(name: &str) -> BenchConfig {
        let mut cfg = BenchConfig::new(name);
        cfg.train = TrainConfig {
            epochs: 2,
            batch_size: 16,
            hidden: vec![4],
            loss: LossConfig::with_epsilon(0.2),
            ..TrainConfig::default()
        };
        cfg
    }

    #[test]
    fn method_names_round_trip() {
        for m in BenchMethod::all() {
            assert_eq!(BenchMethod::from_str(m.name()).unwrap(), m);
        }
        assert!(BenchMethod::from_str("gp").is_err());
        assert_eq!(BenchMethod::Qdsoft.scheme(), SplitScheme::QdSoft);
        assert_eq!(BenchMethod::Doicr.scheme(), SplitScheme::IcpFamily);
    }

    #[test]
    fn sweeps_are_deterministic_and_fully_enumerated() {
        let data = synth_heteroscedastic(160, 2, 5).unwrap();
        let mut cfg = quick_bench("synth");
        cfg.methods = vec![BenchMethod::Icp, BenchMethod::Qdsoft];
        cfg.confidence_levels = vec![0.8];
        cfg.seeds = vec![0, 1];
        cfg.picp_tolerance = 1.0;

        let a = run_benchmark(&data, &cfg).unwrap();
        assert!(a.all_ok(), "failures: {:?}", a.failures);
        assert_eq!(a.records.len(), 4);
        assert_eq!(a.records[0].method, "icp");
        assert_eq!(a.records[3].method, "qdsoft");
        assert!(a.records.iter().all(|r| !r.flags.coverage_deviation));
        assert!(a.records.iter().all(|r| r.n_test == 32));

        let b = run_benchmark(&data, &cfg).unwrap();
        assert_eq!(a.records, b.records);

        let fp_icp = &a.records[0].config_fingerprint;
        let fp_qd = &a.records[2].config_fingerprint;
        assert_ne!(fp_icp, fp_qd);
    }

    #[test]
    fn failing_runs_are_recorded_without_stopping_the_sweep() {
        let data = synth_heteroscedastic(120, 2, 7).unwrap();
        let mut cfg = quick_bench("synth");
        cfg.methods = vec![BenchMethod::Scpo, BenchMethod::Icp];
        cfg.confidence_levels = vec![0.99];
        cfg.train.batch_size = 4;
        cfg.picp_tolerance = 1.0;

        let outcome = run_benchmark(&data, &cfg).unwrap();
        // A batch of four cannot carry a surrogate quantile at epsilon 0.01,
        // so every SCPO run fails while ICP proceeds. Its calibration set of
        // 24 is also too small at that level, flagging unbounded intervals.
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].method, "scpo");
        assert!(outcome.failures[0].error.contains("insufficient calibration"));
        assert_eq!(outcome.records.len(), 1);
        let icp = &outcome.records[0];
        assert_eq!(icp.method, "icp");
        assert!(icp.flags.unbounded_intervals);
        assert_eq!(icp.mpiw, None);
        assert_eq!(icp.picp, 1.0);
        assert!(!outcome.all_ok());
    }

    #[test]
    fn icp_const_reports_unit_scale_widths() {
        let data = synth_heteroscedastic(200, 2, 9).unwrap();
        let mut cfg = quick_bench("synth");
        cfg.methods = vec![BenchMethod::Icp, BenchMethod::IcpConst];
        cfg.confidence_levels = vec![0.8];
        cfg.picp_tolerance = 1.0;

        let outcome = run_benchmark(&data, &cfg).unwrap();
        assert!(outcome.all_ok(), "failures: {:?}", outcome.failures);
        let [icp, icp_const] = &outcome.records[..] else {
            panic!("expected two records");
        };
        // Unit sigma makes every interval exactly 2q wide, so the mean width
        // is the full quantile diameter; the normalized variant varies.
        assert!(icp_const.mpiw.unwrap() > 0.0);
        assert_ne!(icp.mpiw, icp_const.mpiw);
    }

    #[test]
    fn raw_width_reporting_rescales_by_the_target_spread() {
        let data = synth_heteroscedastic(200, 2, 11).unwrap();
        let mut cfg = quick_bench("synth");
        cfg.methods = vec![BenchMethod::Icp];
        cfg.confidence_levels = vec![0.8];
        cfg.picp_tolerance = 1.0;

        let standardized = run_benchmark(&data, &cfg).unwrap();
        cfg.raw_mpiw = true;
        let raw = run_benchmark(&data, &cfg).unwrap();
        let a = standardized.records[0].mpiw.unwrap();
        let b = raw.records[0].mpiw.unwrap();
        assert!(b > 0.0 && a > 0.0);
        let splits = make_splits(data.len(), SplitScheme::IcpFamily, 0).unwrap();
        let (_, std) = data.standardize(&splits.train).unwrap();
        assert!((b / a - std.target_scale()).abs() < 1e-12);
        assert_eq!(standardized.records[0].picp, raw.records[0].picp);
    }

    #[test]
    fn records_survive_jsonl_and_csv_round_trips() {
        let data = synth_heteroscedastic(160, 2, 13).unwrap();
        let mut cfg = quick_bench("synth");
        cfg.methods = vec![BenchMethod::Icp, BenchMethod::Qdsoft];
        cfg.confidence_levels = vec![0.8];
        cfg.picp_tolerance = 1.0;
        let outcome = run_benchmark(&data, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let jsonl = dir.path().join("results.jsonl");
        write_jsonl(&jsonl, &outcome.records).unwrap();
        let back = read_jsonl(&jsonl).unwrap();
        assert_eq!(back, outcome.records);

        let csv_path = dir.path().join("results.csv");
        write_csv(&csv_path, &outcome.records).unwrap();
        let raw = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = raw.lines();
        assert!(lines.next().unwrap().starts_with("dataset,method,"));
        assert_eq!(lines.count(), outcome.records.len());
    }

    #[test]
    fn malformed_sweeps_are_rejected() {
        let data = synth_heteroscedastic(60, 2, 15).unwrap();
        let mut cfg = quick_bench("synth");
        cfg.methods.clear();
        assert!(run_benchmark(&data, &cfg).is_err());

        let mut cfg = quick_bench("synth");
        cfg.confidence_levels = vec![1.0];
        assert!(run_benchmark(&data, &cfg).is_err());

        let mut cfg = quick_bench("synth");
        cfg.seeds.clear();
        assert!(run_benchmark(&data, &cfg).is_err());
    }
}
