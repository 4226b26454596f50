//! The layer stack: sequential Gaussian projection of `log Z`, its reverse
//! accumulation, and predictions.

use nalgebra::{DMatrix, DVector};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::kernel::MomentBelief;
use crate::layer::{GaussianMoments, LayerAdjoint, LayerCache, LayerInput, LayerTrace, SparseGpLayer};
use crate::state::InferenceState;

pub use crate::state::LayerState;

/// One Gaussian belief per layer per output dimension.
pub type Beliefs = Vec<Vec<GaussianMoments>>;

#[derive(Clone, Debug, PartialEq)]
pub struct DgpModel {
    pub layers: Vec<SparseGpLayer>,
    pub standardizer: Standardizer,
}

impl DgpModel {
    pub fn new(layers: Vec<SparseGpLayer>, standardizer: Standardizer) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::InvalidParameter("a model needs at least one layer".into()))?;
        if standardizer.dim() != first.input_dim {
            return Err(Error::shape(format!(
                "standardizer has {} columns, first layer takes {}",
                standardizer.dim(),
                first.input_dim
            )));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim != pair[1].input_dim {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} dims but layer {} takes {}",
                    pair[0].output_dim,
                    i + 1,
                    pair[1].input_dim
                )));
            }
        }
        if layers.last().map(|l| l.output_dim) != Some(1) {
            return Err(Error::shape("the last layer must have one output"));
        }
        Ok(DgpModel { layers, standardizer })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(SparseGpLayer::n_params).sum()
    }

    /// All learnable scalars, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            l.push_params(&mut v);
        }
        v
    }

    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_params() {
            return Err(Error::shape(format!(
                "{} parameters given, model has {}",
                v.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            off += l.set_params(&v[off..]);
        }
        Ok(())
    }

    /// Prior over inducing outputs of every layer: `N(0, K_zz)`.
    pub fn prior_beliefs(&self) -> Result<Beliefs> {
        self.layers
            .iter()
            .map(|l| {
                let k = l.kzz()?;
                Ok(vec![GaussianMoments::new(DVector::zeros(k.nrows()), k)?; l.output_dim])
            })
            .collect()
    }
}

/// Gradients of `log Z` (or a sum of them) for every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerAdjoint>,
}

impl ModelGrads {
    pub fn zeros(model: &DgpModel) -> Self {
        ModelGrads {
            layers: model.layers.iter().map(LayerAdjoint::zeros).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ModelGrads, weight: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.accumulate(b, weight);
        }
    }

    /// Parameter gradient in [`DgpModel::params`] order.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for l in &self.layers {
            l.push_param_grads(&mut v);
        }
        v
    }
}

/// Layer caches for a fixed model and set of beliefs, reused across all
/// datapoints evaluated against them.
pub struct Evaluator<'a> {
    caches: Vec<LayerCache<'a>>,
}

/// Everything produced by one datapoint's forward and backward pass.
#[derive(Clone, Debug)]
pub struct PointResult {
    pub log_z: f64,
    pub traces: Vec<LayerTrace>,
    /// Gradients excluding the `K_zz` path (see [`Evaluator::finish`]).
    pub grads: ModelGrads,
    /// `∂log Z/∂(output mean, output variance)` of each layer.
    pub upstream: Vec<(DVector<f64>, DVector<f64>)>,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a DgpModel, beliefs: &[Vec<GaussianMoments>]) -> Result<Self> {
        if beliefs.len() != model.layers.len() {
            return Err(Error::shape(format!(
                "{} belief layers for a {}-layer model",
                beliefs.len(),
                model.layers.len()
            )));
        }
        let caches = model
            .layers
            .iter()
            .zip(beliefs)
            .enumerate()
            .map(|(i, (l, b))| Ok(LayerCache::new(l, b)?.at_index(i)))
            .collect::<Result<_>>()?;
        Ok(Evaluator { caches })
    }

    pub fn caches(&self) -> &[LayerCache<'a>] {
        &self.caches
    }

    /// Number of layers whose `K_zz` needed extra jitter.
    pub fn jitter_events(&self) -> usize {
        self.caches.iter().filter(|c| c.extra_jitter() > 0.0).count()
    }

    /// Layer-by-layer projected moments for a standardized input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<LayerTrace>> {
        let mut traces: Vec<LayerTrace> = Vec::with_capacity(self.caches.len());
        for (i, cache) in self.caches.iter().enumerate() {
            let trace = if i == 0 {
                cache.forward(LayerInput::Point(x))?
            } else {
                cache.forward(LayerInput::Belief(&traces[i - 1].output))?
            };
            traces.push(trace);
        }
        Ok(traces)
    }

    pub fn moments(&self, x: &[f64]) -> Result<MomentBelief> {
        Ok(self.forward(x)?.pop().expect("at least one layer").output)
    }

    pub fn log_z(&self, x: &[f64], y: f64) -> Result<f64> {
        let out = self.moments(x)?;
        Ok(log_normal(y, out.mean[0], out.variance[0]))
    }

    /// Forward and reverse pass for one datapoint.
    pub fn point_grads(&self, x: &[f64], y: f64) -> Result<PointResult> {
        let traces = self.forward(x)?;
        let top = &traces[traces.len() - 1].output;
        let (m, v) = (top.mean[0], top.variance[0]);
        let r = y - m;
        let log_z = log_normal(y, m, v);
        let mut g_mean = DVector::from_element(1, r / v);
        let mut g_var = DVector::from_element(1, 0.5 * (r * r / (v * v) - 1.0 / v));
        let mut layers = Vec::with_capacity(self.caches.len());
        let mut upstream = Vec::with_capacity(self.caches.len());
        for (cache, trace) in self.caches.iter().zip(&traces).rev() {
            let adj = cache.backward(trace, &g_mean, &g_var);
            let next_mean = adj.d_in_mean.clone();
            let next_var = adj.d_in_var.clone();
            upstream.push((g_mean, g_var));
            g_mean = next_mean;
            g_var = next_var;
            layers.push(adj);
        }
        layers.reverse();
        upstream.reverse();
        Ok(PointResult {
            log_z,
            traces,
            grads: ModelGrads { layers },
            upstream,
        })
    }

    /// Adds the `K_zz` contributions to (possibly summed) point gradients.
    pub fn finish(&self, grads: &mut ModelGrads) {
        for (cache, adj) in self.caches.iter().zip(&mut grads.layers) {
            cache.add_kzz_grads(adj);
        }
    }
}

pub fn log_normal(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + r * r / var)
}

/// Projected output moments for a standardized input.
pub fn forward_moments(model: &DgpModel, beliefs: &[Vec<GaussianMoments>], x: &[f64]) -> Result<MomentBelief> {
    Evaluator::new(model, beliefs)?.moments(x)
}

pub fn log_z(model: &DgpModel, cavity: &[Vec<GaussianMoments>], x: &[f64], y: f64) -> Result<f64> {
    Evaluator::new(model, cavity)?.log_z(x, y)
}

/// `log Z` and its gradient with respect to every cavity belief and every
/// model parameter, the cavity moments held fixed.
pub fn grad_log_z(model: &DgpModel, cavity: &[Vec<GaussianMoments>], x: &[f64], y: f64) -> Result<(f64, ModelGrads)> {
    let ev = Evaluator::new(model, cavity)?;
    let mut r = ev.point_grads(x, y)?;
    ev.finish(&mut r.grads);
    Ok((r.log_z, r.grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Standardized-scale moments.
    pub mean_std: Vec<f64>,
    pub var_std: Vec<f64>,
    /// Raw target-scale moments.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Predictive moments at the rows of `x` (raw input scale) under the posterior.
pub fn predict(model: &DgpModel, state: &InferenceState, x: &DMatrix<f64>) -> Result<Prediction> {
    if x.ncols() != model.input_dim() {
        return Err(Error::shape(format!(
            "inputs have {} columns, model expects {}",
            x.ncols(),
            model.input_dim()
        )));
    }
    let posterior = state.posterior_moments(model)?;
    let ev = Evaluator::new(model, &posterior)?;
    let n = x.nrows();
    let mut out = Prediction {
        mean_std: Vec::with_capacity(n),
        var_std: Vec::with_capacity(n),
        mean: Vec::with_capacity(n),
        var: Vec::with_capacity(n),
    };
    let mut row: Vec<f64> = Vec::with_capacity(x.ncols());
    for i in 0..n {
        row.clear();
        row.extend(x.row(i).iter());
        let xs = model.standardizer.transform_row(&row);
        let m = ev.moments(&xs)?;
        let (mu, var) = (m.mean[0], m.variance[0]);
        let (rm, rv) = model.standardizer.inverse_moments(mu, var);
        out.mean_std.push(mu);
        out.var_std.push(var);
        out.mean.push(rm);
        out.var.push(rv);
    }
    Ok(out)
}
