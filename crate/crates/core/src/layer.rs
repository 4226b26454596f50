//! One FITC sparse GP layer.
//!
//! Each output dimension is an independent GP sharing the layer's inducing
//! inputs and kernel. Given a Gaussian belief `N(m, V)` over the inducing
//! outputs of every dimension, the layer maps an input belief to Gaussian
//! output moments:
//!
//! ```text
//! mean = ψ1ᵀ K⁻¹ m
//! var  = σ² + ψ0 + tr(B ψ2) − mean²,   B = K⁻¹ (V + m mᵀ) K⁻¹ − K⁻¹
//! ```
//!
//! which for a delta input reduces to the usual FITC predictive
//! `σ² + k(x,x) − kᵀK⁻¹k + kᵀK⁻¹VK⁻¹k`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelParams, MomentBelief, PsiStats};
use crate::numerics::{self, JitterPolicy};

/// Relative jitter added to `K_zz` (scaled by `σ_f²`) unless a layer overrides it.
pub const DEFAULT_INDUCING_JITTER: f64 = 1e-6;

/// Output variances at or below this are treated as numerical failure.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseGpLayer {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Inducing inputs, one per row.
    pub z: DMatrix<f64>,
    pub kernel: KernelParams,
    /// log σ², the layer's additive output noise.
    pub log_noise: f64,
    /// Diagonal jitter on `K_zz`, relative to `σ_f²`.
    pub jitter: f64,
}

impl SparseGpLayer {
    pub fn new(z: DMatrix<f64>, kernel: KernelParams, log_noise: f64, output_dim: usize) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::InvalidParameter("a layer needs at least one inducing point".into()));
        }
        if output_dim == 0 {
            return Err(Error::InvalidParameter("output_dim must be >= 1".into()));
        }
        if kernel.input_dim() != z.ncols() {
            return Err(Error::shape(format!(
                "kernel has {} lengthscales but inducing inputs have {} columns",
                kernel.input_dim(),
                z.ncols()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("inducing inputs must be finite".into()));
        }
        Ok(SparseGpLayer {
            input_dim: z.ncols(),
            output_dim,
            z,
            kernel,
            log_noise,
            jitter: DEFAULT_INDUCING_JITTER,
        })
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    /// Inducing prior covariance `K_zz` including the layer jitter.
    pub fn kzz(&self) -> Result<DMatrix<f64>> {
        kernel::inducing_covariance(&self.kernel, &self.z, self.jitter)
    }

    /// Learnable scalars: `log σ_f²`, `log ℓ`, `log σ²`, then `Z` row-major.
    pub fn n_params(&self) -> usize {
        2 + self.input_dim + self.z.len()
    }

    pub fn push_params(&self, out: &mut Vec<f64>) {
        out.push(self.kernel.log_sf2);
        out.extend(&self.kernel.log_lengthscales);
        out.push(self.log_noise);
        for i in 0..self.z.nrows() {
            out.extend(self.z.row(i).iter());
        }
    }

    /// Reads parameters in [`push_params`](Self::push_params) order; returns the count consumed.
    pub fn set_params(&mut self, v: &[f64]) -> usize {
        let d = self.input_dim;
        self.kernel.log_sf2 = v[0];
        self.kernel.log_lengthscales.copy_from_slice(&v[1..1 + d]);
        self.log_noise = v[1 + d];
        let off = 2 + d;
        let m = self.z.nrows();
        for i in 0..m {
            for k in 0..d {
                self.z[(i, k)] = v[off + i * d + k];
            }
        }
        self.n_params()
    }
}

/// A Gaussian in moment form.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape(format!(
                "gaussian with mean length {} and {}x{} covariance",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(GaussianMoments { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// A Gaussian in natural parameters, `∝ exp(−½ uᵀ Λ u + ηᵀ u)`.
///
/// `eta2` stores the precision `Λ` itself. Sites used as data factors may
/// have indefinite `eta2`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSite {
    pub eta1: DVector<f64>,
    pub eta2: DMatrix<f64>,
}

impl GaussianSite {
    pub fn zero(m: usize) -> Self {
        GaussianSite {
            eta1: DVector::zeros(m),
            eta2: DMatrix::zeros(m, m),
        }
    }

    pub fn dim(&self) -> usize {
        self.eta1.len()
    }

    pub fn from_moments(g: &GaussianMoments) -> Result<Self> {
        let f = numerics::chol_psd(&numerics::symmetrize(&g.cov), &strict_policy())
            .map_err(|_| Error::MomentsNotPd)?;
        let precision = f.inverse();
        let eta1 = &precision * &g.mean;
        Ok(GaussianSite { eta1, eta2: precision })
    }

    /// Converts to moments; fails unless the precision is positive definite.
    pub fn to_moments(&self) -> Result<GaussianMoments> {
        let f = numerics::chol_psd(&numerics::symmetrize(&self.eta2), &strict_policy())
            .map_err(|_| Error::CavityNotPd)?;
        let cov = f.inverse();
        let mean = &cov * &self.eta1;
        Ok(GaussianMoments { mean, cov })
    }

    /// `self + weight · other`.
    pub fn plus(&self, other: &GaussianSite, weight: f64) -> GaussianSite {
        GaussianSite {
            eta1: &self.eta1 + &other.eta1 * weight,
            eta2: &self.eta2 + &other.eta2 * weight,
        }
    }

    pub fn scaled(&self, weight: f64) -> GaussianSite {
        GaussianSite {
            eta1: &self.eta1 * weight,
            eta2: &self.eta2 * weight,
        }
    }

    pub fn max_abs_diff(&self, other: &GaussianSite) -> f64 {
        (&self.eta1 - &other.eta1)
            .amax()
            .max((&self.eta2 - &other.eta2).amax())
    }

    pub fn is_finite(&self) -> bool {
        self.eta1.iter().chain(self.eta2.iter()).all(|v| v.is_finite())
    }
}

/// No jitter allowed: used where positive definiteness is a correctness check.
fn strict_policy() -> JitterPolicy {
    JitterPolicy {
        initial_jitter: f64::MIN_POSITIVE,
        growth_factor: 2.0,
        max_attempts: 1,
    }
}

/// Input to a layer: an observed point or a Gaussian belief.
#[derive(Clone, Copy, Debug)]
pub enum LayerInput<'a> {
    Point(&'a [f64]),
    Belief(&'a MomentBelief),
}

struct DimCache {
    m: DVector<f64>,
    /// K⁻¹ m
    a: DVector<f64>,
    /// K⁻¹ V
    kinv_v: DMatrix<f64>,
    /// K⁻¹ (V + m mᵀ) K⁻¹ − K⁻¹
    b: DMatrix<f64>,
}

/// Per-layer quantities that depend only on the parameters and the belief
/// over inducing outputs, shared by every datapoint evaluated against them.
pub struct LayerCache<'a> {
    layer: &'a SparseGpLayer,
    index: usize,
    kzz: DMatrix<f64>,
    kinv: DMatrix<f64>,
    extra_jitter: f64,
    dims: Vec<DimCache>,
}

/// Forward quantities needed to back-propagate one datapoint.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub input: MomentBelief,
    pub point: bool,
    pub psi: PsiStats,
    pub output: MomentBelief,
}

/// Gradients of a scalar objective with respect to everything a layer touches.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdjoint {
    /// `∂/∂m` per output dimension.
    pub d_mean: Vec<DVector<f64>>,
    /// `∂/∂V` per output dimension (entries treated as independent).
    pub d_cov: Vec<DMatrix<f64>>,
    pub d_log_sf2: f64,
    pub d_log_lengthscales: DVector<f64>,
    pub d_z: DMatrix<f64>,
    pub d_log_noise: f64,
    pub d_in_mean: DVector<f64>,
    /// Zero for point inputs.
    pub d_in_var: DVector<f64>,
}

impl LayerAdjoint {
    pub fn zeros(layer: &SparseGpLayer) -> Self {
        let m = layer.num_inducing();
        let d = layer.input_dim;
        LayerAdjoint {
            d_mean: vec![DVector::zeros(m); layer.output_dim],
            d_cov: vec![DMatrix::zeros(m, m); layer.output_dim],
            d_log_sf2: 0.0,
            d_log_lengthscales: DVector::zeros(d),
            d_z: DMatrix::zeros(m, d),
            d_log_noise: 0.0,
            d_in_mean: DVector::zeros(d),
            d_in_var: DVector::zeros(d),
        }
    }

    /// `self += weight · other`.
    pub fn accumulate(&mut self, other: &LayerAdjoint, weight: f64) {
        for (a, b) in self.d_mean.iter_mut().zip(&other.d_mean) {
            a.axpy(weight, b, 1.0);
        }
        for (a, b) in self.d_cov.iter_mut().zip(&other.d_cov) {
            *a += b * weight;
        }
        self.d_log_sf2 += weight * other.d_log_sf2;
        self.d_log_lengthscales.axpy(weight, &other.d_log_lengthscales, 1.0);
        self.d_z += &other.d_z * weight;
        self.d_log_noise += weight * other.d_log_noise;
        self.d_in_mean.axpy(weight, &other.d_in_mean, 1.0);
        self.d_in_var.axpy(weight, &other.d_in_var, 1.0);
    }

    /// Parameter gradient in [`SparseGpLayer::push_params`] order.
    pub fn push_param_grads(&self, out: &mut Vec<f64>) {
        out.push(self.d_log_sf2);
        out.extend(self.d_log_lengthscales.iter());
        out.push(self.d_log_noise);
        for i in 0..self.d_z.nrows() {
            out.extend(self.d_z.row(i).iter());
        }
    }
}

impl<'a> LayerCache<'a> {
    pub fn new(layer: &'a SparseGpLayer, beliefs: &[GaussianMoments]) -> Result<Self> {
        if beliefs.len() != layer.output_dim {
            return Err(Error::shape(format!(
                "layer has {} output dims but {} beliefs were given",
                layer.output_dim,
                beliefs.len()
            )));
        }
        let m = layer.num_inducing();
        if let Some(bad) = beliefs.iter().find(|b| b.dim() != m) {
            return Err(Error::shape(format!(
                "belief over {} inducing outputs for a layer with {m}",
                bad.dim()
            )));
        }
        let kzz = layer.kzz()?;
        let factor = numerics::chol_psd(&kzz, &JitterPolicy::default())?;
        let kinv = factor.inverse();
        let dims = beliefs
            .iter()
            .map(|bel| {
                let a = &kinv * &bel.mean;
                let kinv_v = &kinv * &bel.cov;
                let mut b = &kinv_v * &kinv + &a * a.transpose() - &kinv;
                b = numerics::symmetrize(&b);
                DimCache {
                    m: bel.mean.clone(),
                    a,
                    kinv_v,
                    b,
                }
            })
            .collect();
        Ok(LayerCache {
            layer,
            index: 0,
            kzz,
            kinv,
            extra_jitter: factor.jitter(),
            dims,
        })
    }

    pub fn at_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    pub fn layer(&self) -> &SparseGpLayer {
        self.layer
    }

    /// Jitter beyond the layer's own that was needed to factor `K_zz`.
    pub fn extra_jitter(&self) -> f64 {
        self.extra_jitter
    }

    pub fn kinv(&self) -> &DMatrix<f64> {
        &self.kinv
    }

    pub fn forward(&self, input: LayerInput<'_>) -> Result<LayerTrace> {
        let layer = self.layer;
        let (belief, point) = match input {
            LayerInput::Point(x) => {
                if x.len() != layer.input_dim {
                    return Err(Error::shape(format!(
                        "input has {} entries, layer expects {}",
                        x.len(),
                        layer.input_dim
                    )));
                }
                (MomentBelief::point(x), true)
            }
            LayerInput::Belief(q) => (q.clone(), false),
        };
        let psi = if point {
            PsiStats::point(&layer.kernel, &layer.z, belief.mean.as_slice())?
        } else {
            PsiStats::compute(&layer.kernel, &layer.z, &belief)?
        };
        let noise = layer.noise();
        let n_out = layer.output_dim;
        let mut mean = DVector::zeros(n_out);
        let mut var = DVector::zeros(n_out);
        for (d, dc) in self.dims.iter().enumerate() {
            let mu = psi.psi1.dot(&dc.a);
            let v = noise + psi.psi0 + dc.b.component_mul(&psi.psi2).sum() - mu * mu;
            if !(v > VARIANCE_FLOOR) {
                return Err(Error::NumericalVariance {
                    layer: self.index,
                    variance: v,
                });
            }
            mean[d] = mu;
            var[d] = v;
        }
        Ok(LayerTrace {
            input: belief,
            point,
            psi,
            output: MomentBelief {
                mean,
                variance: var,
            },
        })
    }

    /// Back-propagates `∂L/∂(output mean, output var)` through one forward
    /// pass. The path through `K_zz` is left out; add it with
    /// [`add_kzz_grads`](Self::add_kzz_grads) once per (summed) adjoint.
    pub fn backward(&self, trace: &LayerTrace, g_mean: &DVector<f64>, g_var: &DVector<f64>) -> LayerAdjoint {
        let layer = self.layer;
        let m = layer.num_inducing();
        let psi = &trace.psi;
        let mut adj = LayerAdjoint::zeros(layer);

        let mut g_psi0 = 0.0;
        let mut g_psi1 = DVector::zeros(m);
        let mut g_psi2 = DMatrix::zeros(m, m);

        // K⁻¹ ψ2 K⁻¹, shared by every output dimension.
        let t = if trace.point {
            let c = &self.kinv * &psi.psi1;
            &c * c.transpose()
        } else {
            &self.kinv * &psi.psi2 * &self.kinv
        };

        for (d, dc) in self.dims.iter().enumerate() {
            let gm = g_mean[d];
            let gv = g_var[d];
            let g_eff = gm - 2.0 * gv * trace.output.mean[d];
            g_psi0 += gv;
            adj.d_log_noise += gv * layer.noise();
            g_psi1.axpy(g_eff, &dc.a, 1.0);
            g_psi2 += &dc.b * gv;

            let mut g_a = &psi.psi1 * g_eff;
            g_a += &psi.psi2 * &dc.a * (2.0 * gv);
            adj.d_mean[d] = &self.kinv * g_a;
            adj.d_cov[d] = &t * gv;
        }

        let grads = if trace.point {
            g_psi1 += (&g_psi2 + g_psi2.transpose()) * &psi.psi1;
            kernel::psi_grads(&layer.kernel, &layer.z, &trace.input, psi, g_psi0, Some(&g_psi1), None)
        } else {
            kernel::psi_grads(
                &layer.kernel,
                &layer.z,
                &trace.input,
                psi,
                g_psi0,
                Some(&g_psi1),
                Some(&g_psi2),
            )
        };
        adj.d_log_sf2 = grads.log_sf2;
        adj.d_log_lengthscales = grads.log_lengthscales;
        adj.d_z = grads.z;
        adj.d_in_mean = grads.mean;
        if !trace.point {
            adj.d_in_var = grads.variance;
        }
        adj
    }

    /// Gradient with respect to `K_zz` implied by the belief gradients of
    /// `adj` (holding the beliefs themselves fixed).
    pub fn kzz_cotangent(&self, adj: &LayerAdjoint) -> DMatrix<f64> {
        let m = self.layer.num_inducing();
        let mut g = DMatrix::zeros(m, m);
        for (d, dc) in self.dims.iter().enumerate() {
            let dm = &adj.d_mean[d];
            let dv = &adj.d_cov[d];
            g -= dm * dc.a.transpose();
            g -= dv * dc.kinv_v.transpose();
            g -= &dc.kinv_v * dv;
            g += dv;
        }
        g
    }

    /// Adds the gradient contributions that flow through `K_zz`.
    pub fn add_kzz_grads(&self, adj: &mut LayerAdjoint) {
        let g = self.kzz_cotangent(adj);
        self.add_kzz_cotangent(adj, &g);
    }

    /// Pushes an explicit `∂L/∂K_zz` into the kernel and inducing-input gradients.
    pub fn add_kzz_cotangent(&self, adj: &mut LayerAdjoint, g: &DMatrix<f64>) {
        let layer = self.layer;
        let (gs, gl, gz) = kernel::inducing_covariance_grads(&layer.kernel, &layer.z, &self.kzz, g);
        adj.d_log_sf2 += gs;
        adj.d_log_lengthscales += gl;
        adj.d_z += gz;
    }

    /// Inducing means of each output dimension.
    pub fn belief_means(&self) -> impl Iterator<Item = &DVector<f64>> {
        self.dims.iter().map(|d| &d.m)
    }
}

/// FITC output moments for an observed input.
pub fn propagate_point(layer: &SparseGpLayer, beliefs: &[GaussianMoments], x: &[f64]) -> Result<MomentBelief> {
    let cache = LayerCache::new(layer, beliefs)?;
    Ok(cache.forward(LayerInput::Point(x))?.output)
}

/// Moment-matched output for a Gaussian input belief.
pub fn propagate_uncertain(
    layer: &SparseGpLayer,
    beliefs: &[GaussianMoments],
    q_in: &MomentBelief,
) -> Result<MomentBelief> {
    if q_in.dim() != layer.input_dim {
        return Err(Error::shape(format!(
            "input belief has {} dims, layer expects {}",
            q_in.dim(),
            layer.input_dim
        )));
    }
    let cache = LayerCache::new(layer, beliefs)?;
    Ok(cache.forward(LayerInput::Belief(q_in))?.output)
}

/// Chain-rule gradients of `Σ_d g_mean[d]·mean_d + g_var[d]·var_d` with
/// respect to the layer parameters, the beliefs and the input belief.
pub fn layer_param_grads(
    layer: &SparseGpLayer,
    beliefs: &[GaussianMoments],
    q_in: &MomentBelief,
    g_mean: &DVector<f64>,
    g_var: &DVector<f64>,
) -> Result<LayerAdjoint> {
    let cache = LayerCache::new(layer, beliefs)?;
    let trace = cache.forward(LayerInput::Belief(q_in))?;
    let mut adj = cache.backward(&trace, g_mean, g_var);
    cache.add_kzz_grads(&mut adj);
    Ok(adj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_layer(rng: &mut ChaCha8Rng, m: usize, din: usize, dout: usize) -> SparseGpLayer {
        let ls: Vec<f64> = (0..din).map(|_| rng.random_range(0.6..2.0)).collect();
        let z = crate::testutil::spread_inducing(rng, m, &ls);
        SparseGpLayer::new(
            z,
            KernelParams::new(rng.random_range(0.5..2.0), &ls),
            rng.random_range(0.05f64..0.3).ln(),
            dout,
        )
        .unwrap()
    }

    pub(crate) fn random_belief(rng: &mut ChaCha8Rng, m: usize) -> GaussianMoments {
        let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.5..0.5));
        let mut cov = &g * g.transpose();
        for i in 0..m {
            cov[(i, i)] += 0.1;
        }
        GaussianMoments::new(DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)), cov).unwrap()
    }

    #[test]
    fn prior_belief_gives_prior_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let layer = random_layer(&mut rng, 5, 2, 1);
            let prior = GaussianMoments::new(DVector::zeros(5), layer.kzz().unwrap()).unwrap();
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let out = propagate_point(&layer, &[prior], &x).unwrap();
            assert!(out.mean[0].abs() < 1e-12);
            let expected = layer.noise() + layer.kernel.sf2();
            assert!((out.variance[0] - expected).abs() < 1e-9 * expected);
        }
    }

    #[test]
    fn scalar_example() {
        let layer = SparseGpLayer::new(
            DMatrix::zeros(1, 1),
            KernelParams::new(1.0, &[1.0]),
            0.1f64.ln(),
            1,
        )
        .unwrap()
        .with_jitter(0.0);
        let belief = GaussianMoments::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.5)).unwrap();
        let out = propagate_point(&layer, &[belief], &[0.0]).unwrap();
        assert!((out.mean[0] - 1.0).abs() < 1e-15);
        assert!((out.variance[0] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn uncertain_collapses_to_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let m = rng.random_range(1..7);
            let din = rng.random_range(1..4);
            let dout = rng.random_range(1..3);
            let layer = random_layer(&mut rng, m, din, dout);
            let beliefs: Vec<_> = (0..dout).map(|_| random_belief(&mut rng, m)).collect();
            let x: Vec<f64> = (0..din).map(|_| rng.random_range(-1.5..1.5)).collect();
            let a = propagate_point(&layer, &beliefs, &x).unwrap();
            let b = propagate_uncertain(&layer, &beliefs, &MomentBelief::point(&x)).unwrap();
            for d in 0..dout {
                assert!((a.mean[d] - b.mean[d]).abs() <= 1e-10 * a.mean[d].abs().max(1e-3));
                assert!((a.variance[d] - b.variance[d]).abs() <= 1e-10 * a.variance[d]);
            }
        }
    }

    #[test]
    fn zero_prior_mean_gives_zero_output_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(&mut rng, 4, 2, 1);
        let prior = GaussianMoments::new(DVector::zeros(4), layer.kzz().unwrap()).unwrap();
        let q = MomentBelief::new(DVector::from_vec(vec![0.3, -0.4]), DVector::from_vec(vec![0.5, 0.2])).unwrap();
        let out = propagate_uncertain(&layer, &[prior], &q).unwrap();
        assert_eq!(out.mean[0], 0.0);
    }

    #[test]
    fn non_positive_variance_is_an_error() {
        let layer = SparseGpLayer::new(
            DMatrix::zeros(1, 1),
            KernelParams::new(1.0, &[1.0]),
            (1e-14f64).ln(),
            1,
        )
        .unwrap()
        .with_jitter(0.0);
        // belief with zero covariance at the inducing input: variance is σ² only
        let belief = GaussianMoments::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.0)).unwrap();
        assert!(matches!(
            propagate_point(&layer, &[belief], &[0.0]),
            Err(Error::NumericalVariance { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = random_layer(&mut rng, 3, 2, 2);
        let beliefs: Vec<_> = (0..2).map(|_| random_belief(&mut rng, 3)).collect();
        let q = MomentBelief::new(DVector::from_vec(vec![0.1, 0.2]), DVector::from_vec(vec![0.3, 0.4])).unwrap();
        let adj = layer_param_grads(&layer, &beliefs, &q, &DVector::zeros(2), &DVector::zeros(2)).unwrap();
        assert_eq!(adj, LayerAdjoint::zeros(&layer));
    }

    struct Packed {
        m: usize,
        din: usize,
        dout: usize,
    }

    impl Packed {
        fn pack(&self, layer: &SparseGpLayer, beliefs: &[GaussianMoments], q: &MomentBelief) -> Vec<f64> {
            let mut v = Vec::new();
            layer.push_params(&mut v);
            for b in beliefs {
                v.extend(b.mean.iter());
                v.extend(b.cov.iter());
            }
            v.extend(q.mean.iter());
            v.extend(q.variance.iter());
            v
        }

        fn unpack(&self, template: &SparseGpLayer, v: &[f64]) -> (SparseGpLayer, Vec<GaussianMoments>, MomentBelief) {
            let mut layer = template.clone();
            let mut off = layer.set_params(v);
            let mut beliefs = Vec::new();
            for _ in 0..self.dout {
                let mean = DVector::from_column_slice(&v[off..off + self.m]);
                off += self.m;
                let cov = DMatrix::from_column_slice(self.m, self.m, &v[off..off + self.m * self.m]);
                off += self.m * self.m;
                beliefs.push(GaussianMoments { mean, cov });
            }
            let mean = DVector::from_column_slice(&v[off..off + self.din]);
            let variance = DVector::from_column_slice(&v[off + self.din..off + 2 * self.din]);
            (layer, beliefs, MomentBelief { mean, variance })
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let m = rng.random_range(1..5);
            let din = rng.random_range(1..3);
            let dout = rng.random_range(1..3);
            let layer = random_layer(&mut rng, m, din, dout);
            let beliefs: Vec<_> = (0..dout).map(|_| random_belief(&mut rng, m)).collect();
            let q = MomentBelief::new(
                DVector::from_fn(din, |_, _| rng.random_range(-1.0..1.0)),
                DVector::from_fn(din, |_, _| rng.random_range(0.05..0.5)),
            )
            .unwrap();
            let gm = DVector::from_fn(dout, |_, _| rng.random_range(-1.0..1.0));
            let gv = DVector::from_fn(dout, |_, _| rng.random_range(-1.0..1.0));
            let packed = Packed { m, din, dout };
            let f = |v: &[f64]| {
                let (l, b, q) = packed.unpack(&layer, v);
                let out = propagate_uncertain(&l, &b, &q).unwrap();
                gm.dot(&out.mean) + gv.dot(&out.variance)
            };
            let adj = layer_param_grads(&layer, &beliefs, &q, &gm, &gv).unwrap();
            let mut analytic = Vec::new();
            adj.push_param_grads(&mut analytic);
            for d in 0..dout {
                analytic.extend(adj.d_mean[d].iter());
                analytic.extend(adj.d_cov[d].iter());
            }
            analytic.extend(adj.d_in_mean.iter());
            analytic.extend(adj.d_in_var.iter());
            let numeric = fd_grad(f, &packed.pack(&layer, &beliefs, &q), 1e-5).unwrap();
            assert_eq!(analytic.len(), numeric.len());
            for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                let err = (a - n).abs();
                assert!(err <= 1e-4 * a.abs().max(n.abs()) || err < 1e-8, "coord {i}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn noise_gradient_equals_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let layer = random_layer(&mut rng, 3, 1, 1);
        let belief = random_belief(&mut rng, 3);
        let q = MomentBelief::new(DVector::from_element(1, 0.2), DVector::from_element(1, 0.3)).unwrap();
        let adj = layer_param_grads(&layer, &[belief], &q, &DVector::zeros(1), &DVector::from_element(1, 1.0)).unwrap();
        assert!((adj.d_log_noise - layer.noise()).abs() < 1e-15);
    }

    #[test]
    fn site_conversions_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = random_belief(&mut rng, 4);
        let site = GaussianSite::from_moments(&g).unwrap();
        let back = site.to_moments().unwrap();
        assert!((back.mean - &g.mean).amax() < 1e-10);
        assert!((back.cov - &g.cov).amax() < 1e-10);
        let indefinite = GaussianSite {
            eta1: DVector::zeros(1),
            eta2: DMatrix::from_element(1, 1, -1.0),
        };
        assert!(matches!(indefinite.to_moments(), Err(Error::CavityNotPd)));
    }
}
