//! Command line front end: data splitting, training, benchmarking,
//! reporting, the fixed-split pathology demonstration and grid search.
//!
//! Everything written to stdout and to the output files is a pure function
//! of the arguments, so repeated invocations are byte-identical. Timing and
//! progress chatter goes to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use doicr::bench::{self, BenchConfig, BenchMethod};
use doicr::data::{load_csv, make_splits, synth_heteroscedastic, Dataset, SplitScheme};
use doicr::error::Result;
use doicr::losses::{DEFAULT_GAMMA, DEFAULT_LAMBDA};
use doicr::report::{render_lines, render_scatter, render_table, summarize};
use doicr::trainer::{
    self, default_grid, EpochRecord, GridPoint, Method, ModelBundle, TrainConfig,
    BUNDLE_FORMAT_VERSION,
};

#[derive(Parser)]
#[command(
    name = "doicr",
    version,
    about = "Conformal regression toolkit: direct interval-width training and baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the train/calibration/validation/test partition for n rows.
    Split(SplitArgs),
    /// Train one method and write the model bundle plus a training report.
    Train(TrainArgs),
    /// Sweep methods, confidence levels and seeds; write results.jsonl/csv.
    Benchmark(BenchArgs),
    /// Aggregate a results.jsonl into a table and a scatter plot.
    Report(ReportArgs),
    /// Train with a re-drawn and a frozen embedded split side by side.
    Pathology(PathologyArgs),
    /// Train at every grid point and keep the best validation loss.
    Gridsearch(GridArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row, or "synth" for the built-in
    /// heteroscedastic generator.
    #[arg(long, default_value = "synth")]
    dataset: String,
    /// Target column name (CSV datasets only).
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long, default_value_t = 4000)]
    synth_n: usize,
    #[arg(long, default_value_t = 2)]
    synth_dims: usize,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, String)> {
        if self.dataset == "synth" {
            let data = synth_heteroscedastic(self.synth_n, self.synth_dims, self.synth_seed)?;
            return Ok((data, "synth".to_string()));
        }
        let path = Path::new(&self.dataset);
        let (data, summary) = load_csv(path, &self.target)?;
        if summary.rows_dropped > 0 {
            eprintln!(
                "dropped {} rows with missing or non-numeric cells ({} kept)",
                summary.rows_dropped, summary.rows_kept
            );
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.dataset.clone());
        Ok((data, name))
    }
}

#[derive(Args)]
struct TrainKnobs {
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// sgd, adam or adamw.
    #[arg(long, default_value = "adamw")]
    optimizer: String,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_values_t = [20usize, 20])]
    hidden: Vec<usize>,
    /// Embedded calibration fraction (doicr).
    #[arg(long, default_value_t = 0.25)]
    r: f64,
    /// Coverage penalty weight (scpo, qdsoft).
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Sigmoid sharpness of the soft coverage count.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
}

impl TrainKnobs {
    fn to_config(&self, cl: f64, seed: u64) -> Result<TrainConfig> {
        let mut config = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            optimizer: FromStr::from_str(&self.optimizer)?,
            hidden: self.hidden.clone(),
            r: self.r,
            seed,
            ..TrainConfig::default()
        };
        config.loss.epsilon = 1.0 - cl;
        config.loss.lambda = self.lambda;
        config.loss.gamma = self.gamma;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    n: usize,
    /// icp_family or qd_soft.
    #[arg(long, default_value = "icp_family")]
    scheme: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    knobs: TrainKnobs,
    /// doicr, qdsoft, scpo or traditional.
    #[arg(long, default_value = "doicr")]
    method: String,
    #[arg(long, default_value_t = 0.9)]
    cl: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Freeze the first embedded partition (doicr).
    #[arg(long)]
    fixed_embedded_split: bool,
    /// Print every k-th epoch record.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    knobs: TrainKnobs,
    /// Subset of: doicr, icp, icp-const, scpo, qdsoft.
    #[arg(long, value_delimiter = ',', default_values_t =
        ["doicr".to_string(), "icp".to_string(), "icp-const".to_string(),
         "scpo".to_string(), "qdsoft".to_string()])]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.9])]
    cl: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    /// Coverage deviation beyond this flags the run.
    #[arg(long, default_value_t = bench::DEFAULT_PICP_TOLERANCE)]
    picp_tolerance: f64,
    /// Report widths in the target's original units.
    #[arg(long)]
    raw_mpiw: bool,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// results.jsonl from a benchmark run.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, default_value = "coverage against width")]
    title: String,
}

#[derive(Args)]
struct PathologyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    knobs: TrainKnobs,
    #[arg(long, default_value_t = 0.9)]
    cl: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    knobs: TrainKnobs,
    /// doicr, qdsoft, scpo or traditional.
    #[arg(long, default_value = "doicr")]
    method: String,
    #[arg(long, default_value_t = 0.9)]
    cl: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON array of {lr, weight_decay, batch_size}; the built-in 48-point
    /// grid when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

fn format_epoch(record: &EpochRecord) -> String {
    let opt = |v: Option<f64>| match v {
        Some(v) if v.is_finite() => format!("{v:.4}"),
        Some(_) => "inf".to_string(),
        None => "-".to_string(),
    };
    format!(
        "epoch {:>5}  loss {:>10.6}  picp {:>6}  mpiw {:>8}  q {:>8}",
        record.epoch,
        record.loss,
        opt(record.train_picp),
        opt(record.train_mpiw),
        opt(record.q)
    )
}

fn cmd_split(args: &SplitArgs) -> Result<()> {
    let scheme = SplitScheme::from_str(&args.scheme)?;
    let splits = make_splits(args.n, scheme, args.seed)?;
    let json = serde_json::to_string_pretty(&splits)?;
    match &args.out {
        Some(path) => fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let method = Method::from_str(&args.method)?;
    let (data, name) = args.data.load()?;
    let scheme = if method.uses_calibration() {
        SplitScheme::IcpFamily
    } else {
        SplitScheme::QdSoft
    };
    let splits = make_splits(data.len(), scheme, args.seed)?;
    let (std_data, standardization) = data.standardize(&splits.train)?;
    let (train_x, train_y) = std_data.select(&splits.train);

    let mut config = args.knobs.to_config(args.cl, args.seed)?;
    config.fixed_embedded_split = args.fixed_embedded_split;
    let log_every = args.log_every.max(1);
    let epochs_total = config.epochs;
    let (model, report) = trainer::train_with(method, &train_x, &train_y, &config, |record| {
        if record.epoch % log_every == 0 || record.epoch + 1 == epochs_total {
            println!("{}", format_epoch(record));
        }
    })?;
    eprintln!(
        "trained {method} on {name} ({} rows) in {:.1}s",
        splits.train.len(),
        report.wall_clock_secs
    );

    fs::create_dir_all(&args.out_dir)?;
    let bundle = ModelBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        method,
        epsilon: config.loss.epsilon,
        model,
        standardization,
    };
    let model_path = args.out_dir.join("model.json");
    bundle.save(&model_path)?;
    let report_path = args.out_dir.join("train_report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;

    let (test_x, test_y) = std_data.select(&splits.test);
    if method.uses_calibration() {
        let (cal_x, cal_y) = std_data.select(&splits.cal);
        let eval = trainer::calibrate_and_test(
            &bundle.model,
            &cal_x,
            &cal_y,
            &test_x,
            &test_y,
            config.loss.epsilon,
        )?;
        println!(
            "test: picp {:.4}  mpiw {:.4}  q {:.4}  (n {})",
            eval.metrics.picp, eval.metrics.mpiw, eval.quantile.q, eval.metrics.n
        );
        if eval.unbounded {
            println!("warning: calibration set too small, intervals are unbounded");
        }
    } else {
        let (metrics, crossed, _) = trainer::test_direct_bounds(&bundle.model, &test_x, &test_y)?;
        println!(
            "test: picp {:.4}  mpiw {:.4}  crossed {crossed}  (n {})",
            metrics.picp, metrics.mpiw, metrics.n
        );
    }
    println!("wrote {} and {}", model_path.display(), report_path.display());
    Ok(())
}

fn cmd_benchmark(args: &BenchArgs) -> Result<bool> {
    let (data, name) = args.data.load()?;
    let mut cfg = BenchConfig::new(name);
    cfg.methods = args
        .methods
        .iter()
        .map(|m| BenchMethod::from_str(m))
        .collect::<Result<Vec<_>>>()?;
    cfg.confidence_levels = args.cl.clone();
    cfg.seeds = args.seeds.clone();
    cfg.train = args.knobs.to_config(0.9, 0)?;
    cfg.picp_tolerance = args.picp_tolerance;
    cfg.raw_mpiw = args.raw_mpiw;

    let outcome = bench::run_benchmark(&data, &cfg)?;
    fs::create_dir_all(&args.out_dir)?;
    let jsonl = args.out_dir.join("results.jsonl");
    let csv = args.out_dir.join("results.csv");
    bench::write_jsonl(&jsonl, &outcome.records)?;
    bench::write_csv(&csv, &outcome.records)?;

    print!("{}", render_table(&summarize(&outcome.records)));
    println!("wrote {} and {}", jsonl.display(), csv.display());
    for failure in &outcome.failures {
        eprintln!(
            "failed: {} at cl {} seed {}: {}",
            failure.method, failure.confidence_level, failure.seed, failure.error
        );
    }
    Ok(outcome.all_ok())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let records = bench::read_jsonl(&args.results)?;
    print!("{}", render_table(&summarize(&records)));
    fs::create_dir_all(&args.out_dir)?;
    let svg_path = args.out_dir.join("scatter.svg");
    fs::write(&svg_path, render_scatter(&records, &args.title))?;
    println!("wrote {}", svg_path.display());
    Ok(())
}

fn cmd_pathology(args: &PathologyArgs) -> Result<()> {
    let (data, name) = args.data.load()?;
    let splits = make_splits(data.len(), SplitScheme::IcpFamily, args.seed)?;
    let (std_data, _) = data.standardize(&splits.train)?;
    let (train_x, train_y) = std_data.select(&splits.train);
    let (cal_x, cal_y) = std_data.select(&splits.cal);
    let (test_x, test_y) = std_data.select(&splits.test);

    let mut runs = Vec::new();
    for (label, fixed) in [("shuffled", false), ("fixed", true)] {
        let mut config = args.knobs.to_config(args.cl, args.seed)?;
        config.fixed_embedded_split = fixed;
        let (model, report) = trainer::train(Method::Doicr, &train_x, &train_y, &config)?;
        let eval = trainer::calibrate_and_test(
            &model,
            &cal_x,
            &cal_y,
            &test_x,
            &test_y,
            config.loss.epsilon,
        )?;
        runs.push((label, report, eval));
    }

    let picp_series: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|(label, report, _)| {
            (
                label.to_string(),
                report
                    .epochs
                    .iter()
                    .map(|e| (e.epoch as f64, e.train_picp.unwrap_or(f64::NAN)))
                    .collect(),
            )
        })
        .collect();
    let mpiw_series: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|(label, report, _)| {
            (
                label.to_string(),
                report
                    .epochs
                    .iter()
                    .map(|e| (e.epoch as f64, e.train_mpiw.unwrap_or(f64::NAN)))
                    .collect(),
            )
        })
        .collect();

    fs::create_dir_all(&args.out_dir)?;
    let picp_path = args.out_dir.join("pathology_picp.svg");
    let mpiw_path = args.out_dir.join("pathology_mpiw.svg");
    fs::write(
        &picp_path,
        render_lines(
            &picp_series,
            &format!("{name}: training coverage per epoch"),
            "epoch",
            "PICP",
            Some(args.cl),
        ),
    )?;
    fs::write(
        &mpiw_path,
        render_lines(
            &mpiw_series,
            &format!("{name}: interval width per epoch"),
            "epoch",
            "MPIW",
            None,
        ),
    )?;

    let mut summary = serde_json::Map::new();
    for (label, report, eval) in &runs {
        let last = report.epochs.last().unwrap();
        summary.insert(
            label.to_string(),
            serde_json::json!({
                "final_train_picp": last.train_picp,
                "final_train_mpiw": last.train_mpiw,
                "test_picp": eval.metrics.picp,
                "test_mpiw": eval.metrics.mpiw,
                "clipped_batches": report.clipped_batches,
            }),
        );
        println!(
            "{label:<9} final train picp {:.4}  test picp {:.4}  test mpiw {:.4}",
            last.train_picp.unwrap_or(f64::NAN),
            eval.metrics.picp,
            eval.metrics.mpiw
        );
    }
    let summary_path = args.out_dir.join("pathology.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&serde_json::Value::Object(summary))?,
    )?;
    println!(
        "wrote {}, {} and {}",
        picp_path.display(),
        mpiw_path.display(),
        summary_path.display()
    );
    Ok(())
}

fn cmd_gridsearch(args: &GridArgs) -> Result<()> {
    let method = Method::from_str(&args.method)?;
    let (data, name) = args.data.load()?;
    let scheme = if method.uses_calibration() {
        SplitScheme::IcpFamily
    } else {
        SplitScheme::QdSoft
    };
    let splits = make_splits(data.len(), scheme, args.seed)?;
    let (std_data, standardization) = data.standardize(&splits.train)?;
    let (train_x, train_y) = std_data.select(&splits.train);
    let (val_x, val_y) = std_data.select(&splits.val);

    let grid: Vec<GridPoint> = match &args.grid {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => default_grid(),
    };
    let config = args.knobs.to_config(args.cl, args.seed)?;
    let result = trainer::grid_search(method, &train_x, &train_y, &val_x, &val_y, &config, &grid)?;

    for outcome in &result.outcomes {
        let status = match (&outcome.validation_loss, &outcome.error) {
            (Some(loss), _) => format!("val loss {loss:.6}"),
            (None, Some(err)) => format!("failed: {err}"),
            _ => "skipped".to_string(),
        };
        println!(
            "point {:>2}: lr {:<7} wd {:<7} batch {:<4} {status}",
            outcome.index, outcome.point.lr, outcome.point.weight_decay,
            outcome.point.batch_size
        );
    }
    println!(
        "best point {} for {method} on {name}: lr {} wd {} batch {}",
        result.best_index, result.point.lr, result.point.weight_decay,
        result.point.batch_size
    );

    fs::create_dir_all(&args.out_dir)?;
    let outcomes_path = args.out_dir.join("grid_outcomes.json");
    fs::write(&outcomes_path, serde_json::to_string_pretty(&result.outcomes)?)?;
    let bundle = ModelBundle {
        format_version: BUNDLE_FORMAT_VERSION,
        method,
        epsilon: config.loss.epsilon,
        model: result.model,
        standardization,
    };
    let model_path = args.out_dir.join("model.json");
    bundle.save(&model_path)?;
    println!(
        "wrote {} and {}",
        outcomes_path.display(),
        model_path.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Split(args) => cmd_split(args).map(|()| true),
        Command::Train(args) => cmd_train(args).map(|()| true),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Report(args) => cmd_report(args).map(|()| true),
        Command::Pathology(args) => cmd_pathology(args).map(|()| true),
        Command::Gridsearch(args) => cmd_gridsearch(args).map(|()| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
