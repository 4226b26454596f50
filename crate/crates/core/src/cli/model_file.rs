//! Versioned JSON persistence for a trained model and its SEP state.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::Architecture;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::layer::{GaussianSite, SparseGpLayer};
use crate::network::DgpModel;
use crate::state::InferenceState;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub eta1: Vec<f64>,
    /// Precision matrix, row-major.
    pub eta2: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub input_dim: usize,
    pub output_dim: usize,
    pub log_sf2: f64,
    pub log_lengthscales: Vec<f64>,
    pub log_noise: f64,
    pub jitter: f64,
    pub inducing_inputs: Vec<Vec<f64>>,
    /// Averaged data factor `g`, one per output dimension.
    pub factors: Vec<SiteRecord>,
    /// Posterior `q`, one per output dimension.
    pub posteriors: Vec<SiteRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub iterations: usize,
    /// SHA-256 of the JSON-encoded training configuration.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub architecture: String,
    pub n_train: usize,
    pub standardizer: Standardizer,
    pub layers: Vec<LayerRecord>,
    pub training: TrainingMeta,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if r.iter().any(|row| row.len() != ncols) {
        return Err(Error::shape(format!("{what}: every row must have {ncols} entries")));
    }
    Ok(DMatrix::from_fn(r.len(), ncols, |i, j| r[i][j]))
}

fn site_record(s: &GaussianSite) -> SiteRecord {
    SiteRecord {
        eta1: s.eta1.iter().copied().collect(),
        eta2: rows(&s.eta2),
    }
}

fn site(r: &SiteRecord, m: usize) -> Result<GaussianSite> {
    if r.eta1.len() != m || r.eta2.len() != m {
        return Err(Error::shape(format!("site must have dimension {m}")));
    }
    Ok(GaussianSite {
        eta1: DVector::from_vec(r.eta1.clone()),
        eta2: from_rows(&r.eta2, m, "site precision")?,
    })
}

pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).expect("TrainConfig always serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

impl ModelFile {
    pub fn from_model(
        model: &DgpModel,
        state: &InferenceState,
        architecture: &Architecture,
        training: TrainingMeta,
    ) -> Result<Self> {
        if state.layers.len() != model.layers.len() {
            return Err(Error::shape("state and model have different depths"));
        }
        let layers = model
            .layers
            .iter()
            .zip(&state.layers)
            .map(|(l, s)| LayerRecord {
                input_dim: l.input_dim,
                output_dim: l.output_dim,
                log_sf2: l.kernel.log_sf2,
                log_lengthscales: l.kernel.log_lengthscales.clone(),
                log_noise: l.log_noise,
                jitter: l.jitter,
                inducing_inputs: rows(&l.z),
                factors: s.dims.iter().map(|d| site_record(&d.g)).collect(),
                posteriors: s.dims.iter().map(|d| site_record(&d.q)).collect(),
            })
            .collect();
        Ok(ModelFile {
            format_version: FORMAT_VERSION,
            architecture: architecture.to_string(),
            n_train: state.n_train,
            standardizer: model.standardizer.clone(),
            layers,
            training,
        })
    }

    /// Rebuilds the model and state. Stored factors and posteriors are used
    /// as they are.
    pub fn to_model(&self) -> Result<(Architecture, DgpModel, InferenceState)> {
        let arch: Architecture = self.architecture.parse()?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for r in &self.layers {
            if r.log_lengthscales.len() != r.input_dim {
                return Err(Error::shape("lengthscale count differs from input_dim"));
            }
            let z = from_rows(&r.inducing_inputs, r.input_dim, "inducing inputs")?;
            let kernel = KernelParams {
                log_sf2: r.log_sf2,
                log_lengthscales: r.log_lengthscales.clone(),
            };
            layers.push(SparseGpLayer::new(z, kernel, r.log_noise, r.output_dim)?.with_jitter(r.jitter));
        }
        let shapes = arch.layer_shapes(self.standardizer.dim());
        let actual: Vec<_> = layers
            .iter()
            .map(|l| (l.input_dim, l.output_dim, l.num_inducing()))
            .collect();
        if shapes != actual {
            return Err(Error::shape(format!(
                "layers {actual:?} do not match architecture {}",
                self.architecture
            )));
        }
        let model = DgpModel::new(layers, self.standardizer.clone())?;
        let mut factors = Vec::with_capacity(self.layers.len());
        let mut posteriors = Vec::with_capacity(self.layers.len());
        for (r, l) in self.layers.iter().zip(&model.layers) {
            let m = l.num_inducing();
            if r.factors.len() != l.output_dim || r.posteriors.len() != l.output_dim {
                return Err(Error::shape("one factor and one posterior per output dimension expected"));
            }
            factors.push(r.factors.iter().map(|s| site(s, m)).collect::<Result<Vec<_>>>()?);
            posteriors.push(r.posteriors.iter().map(|s| site(s, m)).collect::<Result<Vec<_>>>()?);
        }
        let mut state = InferenceState::from_factors(&model, self.n_train, factors.clone())?;
        for ((ls, fs), qs) in state.layers.iter_mut().zip(factors).zip(posteriors) {
            for ((d, g), q) in ls.dims.iter_mut().zip(fs).zip(qs) {
                d.g = g;
                d.q = q;
            }
        }
        Ok((arch, model, state))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => return Err(Error::UnsupportedVersion(v.try_into().unwrap_or(u32::MAX))),
            None => return Err(Error::InvalidParameter("model file has no format_version".into())),
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.to_path_buf(),
                message: j.to_string(),
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{self, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained(arch: &str) -> (Architecture, DgpModel, InferenceState, TrainConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = DMatrix::<f64>::from_fn(40, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(40, |i, _| x[(i, 0)].sin() + 0.3 * x[(i, 1)]);
        let config = TrainConfig {
            iterations: 30,
            minibatch_size: 10,
            architecture: arch.parse().unwrap(),
            ..TrainConfig::default()
        };
        let out = trainer::train(&x, &y, &config).unwrap();
        (config.architecture.clone(), out.model, out.state, config)
    }

    fn meta(config: &TrainConfig) -> TrainingMeta {
        TrainingMeta {
            seed: config.seed,
            iterations: config.iterations,
            config_hash: config_hash(config),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for arch in ["y@5", "2@4,y@3"] {
            let (a, model, state, config) = trained(arch);
            let file = ModelFile::from_model(&model, &state, &a, meta(&config)).unwrap();
            let first = file.to_json().unwrap();
            let (a2, model2, state2) = ModelFile::from_json(&first).unwrap().to_model().unwrap();
            assert_eq!(model2, model);
            let second = ModelFile::from_model(&model2, &state2, &a2, meta(&config))
                .unwrap()
                .to_json()
                .unwrap();
            assert_eq!(first, second);
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let (a, model, state, config) = trained("y@4");
        let mut file = ModelFile::from_model(&model, &state, &a, meta(&config)).unwrap();
        file.format_version = 2;
        let text = serde_json::to_string(&file).unwrap();
        assert!(matches!(ModelFile::from_json(&text), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn matrices_are_row_major() {
        let (a, model, state, config) = trained("y@4");
        let file = ModelFile::from_model(&model, &state, &a, meta(&config)).unwrap();
        let z = &model.layers[0].z;
        assert_eq!(file.layers[0].inducing_inputs.len(), z.nrows());
        assert_eq!(file.layers[0].inducing_inputs[1][0], z[(1, 0)]);
        assert_eq!(file.layers[0].inducing_inputs[1][1], z[(1, 1)]);
    }

    #[test]
    fn config_hash_tracks_config() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            learning_rate: 0.02,
            ..TrainConfig::default()
        };
        assert_eq!(config_hash(&a).len(), 64);
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
