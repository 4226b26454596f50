//! Dataset loading, standardization and seeded train/test splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable pointing at the directory holding `registry.toml`.
pub const DATA_DIR_ENV: &str = "SEPDGP_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub column_names: Vec<String>,
    pub target_name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select_rows(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            column_names: self.column_names.clone(),
            target_name: self.target_name.clone(),
        }
    }
}

/// Which column holds the regression target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetColumn {
    /// Negative values count from the end (`-1` is the last column).
    Index(i64),
    Name(String),
}

impl std::str::FromStr for TargetColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim().parse::<i64>() {
            Ok(i) => TargetColumn::Index(i),
            Err(_) => TargetColumn::Name(s.trim().to_string()),
        })
    }
}

impl TargetColumn {
    fn resolve(&self, headers: &[String]) -> Option<usize> {
        match self {
            TargetColumn::Name(name) => headers.iter().position(|h| h == name),
            TargetColumn::Index(i) => {
                let n = headers.len() as i64;
                let idx = if *i < 0 { n + i } else { *i };
                (0..n).contains(&idx).then_some(idx as usize)
            }
        }
    }
}

/// Reads a numeric CSV with a header row. With no target, every column is
/// an input and `y` is empty.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                path: path.into(),
                message: format!("row {} has {} cells, header has {}", r + 1, record.len(), headers.len()),
            });
        }
        let mut row = Vec::with_capacity(headers.len());
        for (c, cell) in record.iter().enumerate() {
            let value = cell.trim().parse::<f64>().ok().filter(|v| v.is_finite());
            match value {
                Some(v) => row.push(v),
                None => {
                    return Err(Error::Parse {
                        path: path.into(),
                        message: format!(
                            "row {}, column {:?}: {:?} is not a finite number",
                            r + 1,
                            headers[c],
                            cell
                        ),
                    })
                }
            }
        }
        rows.push(row);
    }
    Ok((headers, rows))
}

pub fn load_csv(path: &Path, target: &TargetColumn) -> Result<Dataset> {
    let (headers, rows) = read_numeric_csv(path)?;
    let t = target.resolve(&headers).ok_or_else(|| Error::Parse {
        path: path.into(),
        message: format!("target column {target:?} not found"),
    })?;
    if rows.len() < 2 {
        return Err(Error::Parse {
            path: path.into(),
            message: format!("need at least 2 rows, found {}", rows.len()),
        });
    }
    let d = headers.len() - 1;
    let x = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][if j < t { j } else { j + 1 }]);
    let y = DVector::from_fn(rows.len(), |i, _| rows[i][t]);
    let column_names = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != t)
        .map(|(_, h)| h.clone())
        .collect();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        x,
        y,
        column_names,
        target_name: headers[t].clone(),
    })
}

/// Per-column affine standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub input_means: Vec<f64>,
    pub input_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
    /// Indices of input columns that were constant (std forced to 1).
    #[serde(default)]
    pub constant_columns: Vec<usize>,
}

fn mean_and_pop_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Standardizer {
    pub fn identity(d: usize) -> Self {
        Standardizer {
            input_means: vec![0.0; d],
            input_stds: vec![1.0; d],
            target_mean: 0.0,
            target_std: 1.0,
            constant_columns: Vec::new(),
        }
    }

    /// Fits means and population standard deviations.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidParameter("cannot standardize an empty dataset".into()));
        }
        let mut input_means = Vec::with_capacity(x.ncols());
        let mut input_stds = Vec::with_capacity(x.ncols());
        let mut constant_columns = Vec::new();
        for j in 0..x.ncols() {
            let (m, s) = mean_and_pop_std(x.column(j).iter().copied());
            input_means.push(m);
            if s > 0.0 {
                input_stds.push(s);
            } else {
                log::warn!("input column {j} is constant; using std 1");
                constant_columns.push(j);
                input_stds.push(1.0);
            }
        }
        let (target_mean, ts) = mean_and_pop_std(y.iter().copied());
        let target_std = if ts > 0.0 { ts } else { 1.0 };
        Ok(Standardizer {
            input_means,
            input_stds,
            target_mean,
            target_std,
            constant_columns,
        })
    }

    pub fn fit_dataset(train: &Dataset) -> Result<Self> {
        Self::fit(&train.x, &train.y)
    }

    pub fn dim(&self) -> usize {
        self.input_means.len()
    }

    pub fn transform_row(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_means.iter().zip(&self.input_stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn transform_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.input_means[j]) / self.input_stds[j]
        })
    }

    pub fn inverse_x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            x[(i, j)] * self.input_stds[j] + self.input_means[j]
        })
    }

    pub fn transform_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.target_mean) / self.target_std)
    }

    pub fn inverse_y(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.target_std + self.target_mean)
    }

    /// Maps a standardized predictive `(mean, var)` to the raw target scale.
    pub fn inverse_moments(&self, mean: f64, var: f64) -> (f64, f64) {
        (
            self.target_mean + self.target_std * mean,
            var * self.target_std * self.target_std,
        )
    }
}

/// One train/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded random splits; split `i` is drawn from an RNG seeded with `seed + i`.
pub fn make_splits(n: usize, n_splits: usize, train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n_train = (n as f64 * train_fraction).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidParameter(format!(
            "split of {n} points at fraction {train_fraction} leaves an empty side"
        )));
    }
    Ok((0..n_splits)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let test = perm.split_off(n_train);
            Split { train: perm, test }
        })
        .collect())
}

#[derive(Clone, Debug, Deserialize)]
pub struct RegistryEntry {
    pub path: PathBuf,
    pub target: TargetColumn,
}

/// Maps dataset names to local CSV files, read from `registry.toml`.
#[derive(Clone, Debug)]
pub struct Registry {
    root: PathBuf,
    entries: BTreeMap<String, RegistryEntry>,
}

impl Registry {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("registry.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries: BTreeMap<String, RegistryEntry> = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok(Registry {
            root: root.to_path_buf(),
            entries,
        })
    }

    /// Uses `$SEPDGP_DATA_DIR`, falling back to `./data`.
    pub fn from_env() -> Result<Self> {
        let root = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"));
        Self::load(&root)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&RegistryEntry> {
        self.entries.get(name)
    }

    pub fn load_dataset(&self, name: &str) -> Result<Dataset> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::InvalidParameter(format!("dataset {name:?} is not in the registry")))?;
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.root.join(&entry.path)
        };
        let mut ds = load_csv(&path, &entry.target)?;
        ds.name = name.to_string();
        Ok(ds)
    }
}
