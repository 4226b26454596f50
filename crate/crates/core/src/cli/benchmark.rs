//! Repeated random-split benchmarks over registry datasets.

use std::path::Path;

use serde::Deserialize;

use super::{csv_writer, fmt_float, BenchmarkArgs, Status};
use crate::arch::Architecture;
use crate::data::{self, Dataset, Registry};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::network;
use crate::trainer::{self, TrainConfig};

pub const DEFAULT_SPLITS: usize = 5;
pub const FULL_SPLITS: usize = 20;

/// Training settings shared by every cell of a benchmark.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub iterations: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub damping: Option<f64>,
}

impl Default for RunSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        RunSettings {
            iterations: d.iterations,
            minibatch_size: d.minibatch_size,
            learning_rate: d.learning_rate,
            damping: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub datasets: Vec<String>,
    pub architectures: Vec<Architecture>,
    pub n_splits: Option<usize>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Registry root; `$SEPDGP_DATA_DIR` or `./data` if absent.
    pub data_dir: Option<std::path::PathBuf>,
    #[serde(default)]
    pub train: RunSettings,
}

fn default_train_fraction() -> f64 {
    0.9
}

impl BenchmarkSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: BenchmarkSpec = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if spec.datasets.is_empty() || spec.architectures.is_empty() {
            return Err(Error::InvalidParameter("benchmark needs at least one dataset and architecture".into()));
        }
        Ok(spec)
    }

    pub fn splits(&self, full: bool) -> usize {
        if full {
            FULL_SPLITS
        } else {
            self.n_splits.unwrap_or(DEFAULT_SPLITS)
        }
    }

    pub fn config(&self, arch: &Architecture, seed: u64, serial: bool) -> TrainConfig {
        let mut c = TrainConfig {
            iterations: self.train.iterations,
            minibatch_size: self.train.minibatch_size,
            learning_rate: self.train.learning_rate,
            seed,
            architecture: arch.clone(),
            ..TrainConfig::default()
        };
        c.sep.damping = self.train.damping;
        c.sep.parallel_within_minibatch = !serial;
        c
    }
}

/// One benchmark row.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub dataset: String,
    pub n: usize,
    pub d: usize,
    pub arch: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mll_mean: f64,
    pub mll_std: f64,
    pub failed_splits: usize,
}

/// Mean and sample standard deviation (n − 1) of the finite values; NaN
/// when there are none.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let ok: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if ok.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / n;
    if ok.len() == 1 {
        return (mean, 0.0);
    }
    let var = ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains on the training part of a split and scores the held-out part.
pub fn run_split(ds: &Dataset, split: &data::Split, config: &TrainConfig) -> Result<EvalReport> {
    let train = ds.subset(&split.train);
    let test = ds.subset(&split.test);
    let out = trainer::train(&train.x, &train.y, config)?;
    let p = network::predict(&out.model, &out.state, &test.x)?;
    EvalReport::new(&p.mean, &p.var, test.y.as_slice())
}

pub fn run_cell(ds: &Dataset, arch: &Architecture, spec: &BenchmarkSpec, n_splits: usize, serial: bool) -> Result<CellSummary> {
    let splits = data::make_splits(ds.len(), n_splits, spec.train_fraction, spec.seed)?;
    let mut rmse = Vec::with_capacity(n_splits);
    let mut mll = Vec::with_capacity(n_splits);
    let mut failed = 0;
    for (i, split) in splits.iter().enumerate() {
        let config = spec.config(arch, spec.seed + i as u64, serial);
        match run_split(ds, split, &config) {
            Ok(r) => {
                log::info!("{} {arch} split {i}: rmse {:.4} mll {:.4}", ds.name, r.rmse, r.mll);
                rmse.push(r.rmse);
                mll.push(r.mll);
            }
            Err(e) => {
                log::warn!("{} {arch} split {i} failed: {e}", ds.name);
                failed += 1;
                rmse.push(f64::NAN);
                mll.push(f64::NAN);
            }
        }
    }
    let (rmse_mean, rmse_std) = mean_std(&rmse);
    let (mll_mean, mll_std) = mean_std(&mll);
    Ok(CellSummary {
        dataset: ds.name.clone(),
        n: ds.len(),
        d: ds.dim(),
        arch: arch.to_string(),
        rmse_mean,
        rmse_std,
        mll_mean,
        mll_std,
        failed_splits: failed,
    })
}

pub fn run_benchmark(spec: &BenchmarkSpec, full: bool, serial: bool) -> Result<Vec<CellSummary>> {
    let registry = match &spec.data_dir {
        Some(dir) => Registry::load(dir)?,
        None => Registry::from_env()?,
    };
    for name in &spec.datasets {
        if registry.get(name).is_none() {
            return Err(Error::InvalidParameter(format!("dataset {name:?} is not in the registry")));
        }
    }
    let n_splits = spec.splits(full);
    let mut rows = Vec::new();
    for name in &spec.datasets {
        let ds = match registry.load_dataset(name) {
            Ok(ds) => Some(ds),
            Err(e) => {
                log::warn!("{name}: {e}");
                None
            }
        };
        for arch in &spec.architectures {
            let row = match &ds {
                Some(ds) => run_cell(ds, arch, spec, n_splits, serial)?,
                None => CellSummary {
                    dataset: name.clone(),
                    n: 0,
                    d: 0,
                    arch: arch.to_string(),
                    rmse_mean: f64::NAN,
                    rmse_std: f64::NAN,
                    mll_mean: f64::NAN,
                    mll_std: f64::NAN,
                    failed_splits: n_splits,
                },
            };
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn cmd_benchmark(a: &BenchmarkArgs) -> Result<Status> {
    let spec = BenchmarkSpec::load(&a.spec)?;
    let rows = run_benchmark(&spec, a.full, a.serial)?;
    let mut w = csv_writer(a.out.as_deref())?;
    w.write_record(["dataset", "N", "D", "arch", "rmse_mean", "rmse_std", "mll_mean", "mll_std"])?;
    for r in &rows {
        w.write_record([
            r.dataset.clone(),
            r.n.to_string(),
            r.d.to_string(),
            r.arch.clone(),
            fmt_float(r.rmse_mean),
            fmt_float(r.rmse_std),
            fmt_float(r.mll_mean),
            fmt_float(r.mll_std),
        ])?;
    }
    w.flush().map_err(|e| Error::io(a.out.clone().unwrap_or_default(), e))?;
    Ok(Status::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_ignores_nan() {
        let (m, s) = mean_std(&[1.0, f64::NAN, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert!(mean_std(&[f64::NAN]).0.is_nan());
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn spec_parses_with_defaults() {
        let spec: BenchmarkSpec = toml::from_str(
            r#"
            datasets = ["boston"]
            architectures = ["y@50", "2@50,y@50"]
            [train]
            iterations = 100
            "#,
        )
        .unwrap();
        assert_eq!(spec.architectures.len(), 2);
        assert_eq!(spec.train_fraction, 0.9);
        assert_eq!(spec.splits(false), 5);
        assert_eq!(spec.splits(true), 20);
        assert_eq!(spec.train.minibatch_size, 50);
        let c = spec.config(&spec.architectures[1], 7, true);
        assert_eq!(c.seed, 7);
        assert_eq!(c.iterations, 100);
        assert!(!c.sep.parallel_within_minibatch);
    }

    #[test]
    fn missing_dataset_file_gives_nan_row() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("registry.toml"), "[gone]\npath = \"gone.csv\"\ntarget = -1\n").unwrap();
        let spec = BenchmarkSpec {
            datasets: vec!["gone".into()],
            architectures: vec!["y@5".parse().unwrap()],
            n_splits: Some(2),
            train_fraction: 0.9,
            seed: 0,
            data_dir: Some(dir.path().to_path_buf()),
            train: RunSettings::default(),
        };
        let rows = run_benchmark(&spec, false, true).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].rmse_mean.is_nan());
    }
}
