//! The `sepdgp` command line: train, predict, eval, benchmark and verify.
//!
//! Exit codes: 0 success, 1 verification failure, 2 bad flags or input
//! files, 3 training or numerical failure.

pub mod benchmark;
pub mod model_file;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use crate::arch::Architecture;
use crate::data::{self, TargetColumn};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::network;
use crate::sep::{SepConfig, UpdateMode};
use crate::trainer::{self, HistoryRow, TrainConfig};
use crate::verify::{self, VerifyOptions};

pub use model_file::ModelFile;

#[derive(Debug, Parser)]
#[command(name = "sepdgp", version, about = "Deep Gaussian process regression with stochastic EP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a CSV file.
    Train(TrainArgs),
    /// Predictive mean and variance for every row of a CSV file.
    Predict(PredictArgs),
    /// RMSE and mean log-density on a labelled CSV file.
    Eval(EvalArgs),
    /// Repeated random-split benchmark described by a TOML file.
    Benchmark(BenchmarkArgs),
    /// Run the analytic-vs-oracle verification suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Target column name, or index (negative counts from the end).
    #[arg(long, default_value = "-1", allow_hyphen_values = true)]
    pub target: TargetColumn,
    #[arg(long, default_value = "y@50")]
    pub arch: Architecture,
    #[arg(long, default_value_t = 4000)]
    pub iters: usize,
    #[arg(long, default_value_t = 50)]
    pub minibatch: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// History CSV; defaults to the model path with extension `history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Evaluate minibatch points on one thread.
    #[arg(long)]
    pub serial: bool,
    /// Per-datapoint SEP step size (default 1/N).
    #[arg(long)]
    pub damping: Option<f64>,
    /// Update the factor after every datapoint instead of once per minibatch.
    #[arg(long)]
    pub per_datapoint: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Column to drop before predicting, if the file also holds targets.
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<TargetColumn>,
    /// Output CSV; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Labelled data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "-1", allow_hyphen_values = true)]
    pub target: TargetColumn,
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub model: Option<PathBuf>,
    /// Score an existing predictions CSV (columns `mean`, `variance`) instead of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// TOML benchmark description.
    pub spec: PathBuf,
    /// Use 20 splits regardless of the spec.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub serial: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 10^4 Monte-Carlo samples instead of 10^6.
    #[arg(long)]
    pub quick: bool,
    /// Where to write the CSV report.
    #[arg(long, default_value = "verify_report.csv")]
    pub report: PathBuf,
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub inject_psi1_fault: f64,
}

/// Outcome of a command that ran to completion.
#[derive(Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    VerificationFailed,
}

/// Maps a library error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::Parse { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Shape(_)
        | Error::InvalidParameter(_)
        | Error::UnsupportedVersion(_)
        | Error::Architecture { .. } => 2,
        _ => 3,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(Status::Ok) => 0,
        Ok(Status::VerificationFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<Status> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Benchmark(a) => benchmark::cmd_benchmark(&a),
        Command::Verify(a) => cmd_verify(&a),
    }
}

/// Seventeen significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer(out: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::io(p, e))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    Ok(csv::Writer::from_writer(sink))
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv_writer(Some(path))?;
    w.write_record(["iter", "mean_logZ", "skips", "jitter_events"])?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            fmt_float(r.mean_log_z),
            r.skips.to_string(),
            r.jitter_events.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        minibatch_size: a.minibatch,
        iterations: a.iters,
        learning_rate: a.lr,
        seed: a.seed,
        architecture: a.arch.clone(),
        sep: SepConfig {
            damping: a.damping,
            parallel_within_minibatch: !a.serial,
            mode: if a.per_datapoint {
                UpdateMode::PerDatapoint
            } else {
                UpdateMode::PerMinibatch
            },
            ..SepConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn cmd_train(a: &TrainArgs) -> Result<Status> {
    let config = train_config(a);
    config.validate()?;
    let ds = data::load_csv(&a.data, &a.target)?;
    let outcome = trainer::train(&ds.x, &ds.y, &config)?;
    let meta = model_file::TrainingMeta {
        seed: config.seed,
        iterations: config.iterations,
        config_hash: model_file::config_hash(&config),
    };
    ModelFile::from_model(&outcome.model, &outcome.state, &config.architecture, meta)?.save(&a.out)?;
    let history = a.history.clone().unwrap_or_else(|| a.out.with_extension("history.csv"));
    write_history(&history, &outcome.history)?;
    Ok(Status::Ok)
}

fn load_inputs(path: &Path, target: Option<&TargetColumn>) -> Result<(Vec<String>, DMatrix<f64>)> {
    match target {
        Some(t) => {
            let ds = data::load_csv(path, t)?;
            Ok((ds.column_names, ds.x))
        }
        None => {
            let (headers, rows) = data::read_numeric_csv(path)?;
            let d = headers.len();
            Ok((headers, DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])))
        }
    }
}

fn cmd_predict(a: &PredictArgs) -> Result<Status> {
    let (_, model, state) = ModelFile::load(&a.model)?.to_model()?;
    let (names, x) = load_inputs(&a.data, a.target.as_ref())?;
    let pred = network::predict(&model, &state, &x)?;
    let mut w = csv_writer(a.out.as_deref())?;
    let mut header = names;
    header.extend(["mean".to_string(), "variance".to_string()]);
    w.write_record(&header)?;
    for i in 0..x.nrows() {
        let mut rec: Vec<String> = x.row(i).iter().map(|&v| fmt_float(v)).collect();
        rec.push(fmt_float(pred.mean[i]));
        rec.push(fmt_float(pred.var[i]));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(a.out.clone().unwrap_or_default(), e))?;
    Ok(Status::Ok)
}

/// Reads the `mean` and `variance` columns of a predictions CSV.
pub fn read_predictions(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let (headers, rows) = data::read_numeric_csv(path)?;
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            message: format!("missing column {name:?}"),
        })
    };
    let (m, v) = (col("mean")?, col("variance")?);
    Ok((rows.iter().map(|r| r[m]).collect(), rows.iter().map(|r| r[v]).collect()))
}

fn cmd_eval(a: &EvalArgs) -> Result<Status> {
    let ds = data::load_csv(&a.data, &a.target)?;
    let (means, vars) = match (&a.model, &a.predictions) {
        (Some(m), _) => {
            let (_, model, state) = ModelFile::load(m)?.to_model()?;
            let p = network::predict(&model, &state, &ds.x)?;
            (p.mean, p.var)
        }
        (None, Some(p)) => read_predictions(p)?,
        (None, None) => return Err(Error::InvalidParameter("either --model or --predictions is required".into())),
    };
    if means.len() != ds.len() {
        return Err(Error::shape(format!("{} predictions for {} targets", means.len(), ds.len())));
    }
    let report = EvalReport::new(&means, &vars, ds.y.as_slice())?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["rmse", "mll", "n_test"])?;
    w.write_record([fmt_float(report.rmse), fmt_float(report.mll), report.n_test.to_string()])?;
    w.flush().map_err(|e| Error::io(a.out.clone().unwrap_or_default(), e))?;
    Ok(Status::Ok)
}

fn cmd_verify(a: &VerifyArgs) -> Result<Status> {
    let mut opts = if a.quick {
        VerifyOptions::quick(a.seed)
    } else {
        VerifyOptions::full(a.seed)
    };
    opts.psi1_fault = a.inject_psi1_fault;
    let checks = verify::run_all(&opts)?;
    let mut w = csv_writer(Some(&a.report))?;
    w.write_record(["suite", "check", "status", "detail"])?;
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<14} {:<40} {}", c.suite, c.name, c.detail);
        w.write_record([c.suite, c.name.as_str(), status, c.detail.as_str()])?;
        failed += usize::from(!c.passed);
    }
    w.flush().map_err(|e| Error::io(&a.report, e))?;
    println!("{} checks, {failed} failed; report written to {}", checks.len(), a.report.display());
    Ok(if failed == 0 {
        Status::Ok
    } else {
        Status::VerificationFailed
    })
}
