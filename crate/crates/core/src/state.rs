//! SEP inference state: one averaged factor `g` per layer and output
//! dimension, with the posterior `q = prior + N·g` kept in sync.
//!
//! Moments are computed in the prior's whitened frame. With `K = L Lᵀ` and
//! `c` copies of `g`,
//!
//! ```text
//! S = I + c Lᵀ Λ_g L,   V = L S⁻¹ Lᵀ,   m = c V η_g
//! ```
//!
//! which never forms `K⁻¹` and stays well conditioned when `K` is not.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::layer::{GaussianMoments, GaussianSite};
use crate::network::{Beliefs, DgpModel};
use crate::numerics::{self, JitterPolicy};

/// Factor and posterior for one output dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DimState {
    pub g: GaussianSite,
    pub q: GaussianSite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    /// `N(0, K_zz)` in natural parameters.
    pub prior: GaussianSite,
    pub dims: Vec<DimState>,
    /// Lower Cholesky factor of `K_zz`.
    chol: DMatrix<f64>,
}

impl LayerState {
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceState {
    pub n_train: usize,
    pub layers: Vec<LayerState>,
}

/// Moments of `prior + c·g`, or `None` if that is not a proper Gaussian.
pub fn whitened_moments(chol: &DMatrix<f64>, g: &GaussianSite, c: f64) -> Option<GaussianMoments> {
    let m = chol.nrows();
    let mut s = chol.transpose() * &g.eta2 * chol * c;
    s = numerics::symmetrize(&s);
    for i in 0..m {
        s[(i, i)] += 1.0;
    }
    let r = Cholesky::new(s)?;
    let x = r.l().solve_lower_triangular(&chol.transpose())?;
    let cov = x.transpose() * &x;
    let mean = &cov * &g.eta1 * c;
    if cov.iter().chain(mean.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    Some(GaussianMoments { mean, cov })
}

impl InferenceState {
    /// Every factor starts at zero, so `q` equals the prior.
    pub fn new(model: &DgpModel, n_train: usize) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::InvalidParameter("n_train must be >= 1".into()));
        }
        let layers = model
            .layers
            .iter()
            .map(|l| {
                let m = l.num_inducing();
                let zero = GaussianSite::zero(m);
                Ok(LayerState {
                    prior: zero.clone(),
                    dims: vec![
                        DimState {
                            g: zero.clone(),
                            q: zero.clone()
                        };
                        l.output_dim
                    ],
                    chol: DMatrix::zeros(m, m),
                })
            })
            .collect::<Result<_>>()?;
        let mut state = InferenceState { n_train, layers };
        state.refresh(model)?;
        Ok(state)
    }

    /// Rebuilds from stored factors (e.g. after loading a model file).
    pub fn from_factors(model: &DgpModel, n_train: usize, factors: Vec<Vec<GaussianSite>>) -> Result<Self> {
        let mut state = Self::new(model, n_train)?;
        if factors.len() != state.layers.len() {
            return Err(Error::shape("factor layers do not match the model"));
        }
        for (ls, fs) in state.layers.iter_mut().zip(factors) {
            if fs.len() != ls.dims.len() || fs.iter().any(|f| f.dim() != ls.prior.dim()) {
                return Err(Error::shape("factor dimensions do not match the model"));
            }
            for (d, f) in ls.dims.iter_mut().zip(fs) {
                d.g = f;
            }
        }
        state.refresh(model)?;
        Ok(state)
    }

    /// Number of stored scalars; depends on the architecture only.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let m = l.prior.dim();
                let site = m + m * m;
                site + l.dims.len() * 2 * site
            })
            .sum()
    }

    fn copies(&self, posterior: bool) -> f64 {
        if posterior {
            self.n_train as f64
        } else {
            self.n_train as f64 - 1.0
        }
    }

    /// Recomputes the prior from the model's current `K_zz` and rebuilds
    /// every `q`. A factor whose posterior or cavity would not be a proper
    /// Gaussian under the new prior is halved until both are. Returns the
    /// number of such repairs.
    pub fn refresh(&mut self, model: &DgpModel) -> Result<usize> {
        if model.layers.len() != self.layers.len() {
            return Err(Error::shape("model and state have different depths"));
        }
        let n = self.n_train as f64;
        let mut repairs = 0;
        for (layer, ls) in model.layers.iter().zip(&mut self.layers) {
            let kzz = layer.kzz()?;
            let factor = numerics::chol_psd(&kzz, &JitterPolicy::default())?;
            ls.chol = factor.l();
            let kinv = factor.inverse();
            ls.prior = GaussianSite {
                eta1: DVector::zeros(kinv.nrows()),
                eta2: kinv,
            };
            for d in &mut ls.dims {
                let mut tries = 0;
                while whitened_moments(&ls.chol, &d.g, n).is_none()
                    || (n > 1.0 && whitened_moments(&ls.chol, &d.g, n - 1.0).is_none())
                {
                    tries += 1;
                    d.g = if tries > 30 || !d.g.is_finite() {
                        GaussianSite::zero(d.g.dim())
                    } else {
                        d.g.scaled(0.5)
                    };
                    if tries > 31 {
                        return Err(Error::PosteriorNotPd);
                    }
                }
                if tries > 0 {
                    repairs += 1;
                }
                d.q = ls.prior.plus(&d.g, n);
            }
        }
        if repairs > 0 {
            log::debug!("shrunk {repairs} factors to keep the posterior proper");
        }
        Ok(repairs)
    }

    fn moments(&self, copies: f64) -> Result<Beliefs> {
        self.layers
            .iter()
            .map(|ls| {
                ls.dims
                    .iter()
                    .map(|d| whitened_moments(&ls.chol, &d.g, copies).ok_or(Error::CavityNotPd))
                    .collect()
            })
            .collect()
    }

    pub fn posterior_moments(&self, model: &DgpModel) -> Result<Beliefs> {
        self.check_model(model)?;
        self.moments(self.copies(true)).map_err(|_| Error::PosteriorNotPd)
    }

    /// The cavity `q / g`, shared by every datapoint.
    pub fn cavity_moments(&self, model: &DgpModel) -> Result<Beliefs> {
        self.check_model(model)?;
        self.moments(self.copies(false))
    }

    /// Replaces one factor and rebuilds its posterior; fails (leaving the
    /// state unchanged) if the posterior would not be positive definite.
    pub fn set_factor(&mut self, layer: usize, dim: usize, g: GaussianSite) -> Result<()> {
        let n = self.n_train as f64;
        let ls = &mut self.layers[layer];
        if !g.is_finite() || whitened_moments(&ls.chol, &g, n).is_none() {
            return Err(Error::PosteriorNotPd);
        }
        ls.dims[dim].q = ls.prior.plus(&g, n);
        ls.dims[dim].g = g;
        Ok(())
    }

    pub fn factors(&self) -> Vec<Vec<GaussianSite>> {
        self.layers
            .iter()
            .map(|l| l.dims.iter().map(|d| d.g.clone()).collect())
            .collect()
    }

    fn check_model(&self, model: &DgpModel) -> Result<()> {
        let ok = model.layers.len() == self.layers.len()
            && model
                .layers
                .iter()
                .zip(&self.layers)
                .all(|(l, s)| l.output_dim == s.dims.len() && l.num_inducing() == s.prior.dim());
        if ok {
            Ok(())
        } else {
            Err(Error::shape("inference state does not match the model"))
        }
    }
}
