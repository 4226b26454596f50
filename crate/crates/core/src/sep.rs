//! Stochastic EP primitives: cavities, moment matching and damped updates of
//! the averaged factor.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{GaussianMoments, GaussianSite};
use crate::numerics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Average the site estimates of a minibatch, then update once.
    #[default]
    PerMinibatch,
    /// Update after every datapoint, recomputing the cavity each time.
    PerDatapoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SepConfig {
    /// Step size `η` per datapoint; `None` means `1/N`.
    pub damping: Option<f64>,
    pub skip_on_failure: bool,
    pub parallel_within_minibatch: bool,
    pub mode: UpdateMode,
}

impl Default for SepConfig {
    fn default() -> Self {
        SepConfig {
            damping: None,
            skip_on_failure: true,
            parallel_within_minibatch: false,
            mode: UpdateMode::PerMinibatch,
        }
    }
}

impl SepConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.damping {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidParameter(format!("damping must be in (0, 1], got {d}")));
            }
        }
        Ok(())
    }

    pub fn step_size(&self, n_train: usize) -> f64 {
        self.damping.unwrap_or(1.0 / n_train as f64)
    }

    /// Step applied to the mean site estimate of `n_ok` datapoints.
    pub fn minibatch_step(&self, n_train: usize, n_ok: usize) -> f64 {
        (self.step_size(n_train) * n_ok as f64).min(1.0)
    }
}

/// Cavity `q − g` in natural parameters, converted to moments.
pub fn cavity(q: &GaussianSite, g: &GaussianSite) -> Result<GaussianMoments> {
    q.plus(g, -1.0).to_moments()
}

/// Tilted moments from `∂log Z/∂m` and `∂log Z/∂V` at the cavity:
/// `m + V·dm` and `V − V (dm dmᵀ − 2 dV) V`.
pub fn moment_match(cav: &GaussianMoments, dm: &DVector<f64>, dv: &DMatrix<f64>) -> Result<GaussianMoments> {
    let v = &cav.cov;
    let mean = &cav.mean + v * dm;
    let w = dm * dm.transpose() - dv * 2.0;
    let cov = numerics::symmetrize(&(v - v * w * v));
    if !numerics::is_pd(&cov) {
        return Err(Error::MomentsNotPd);
    }
    Ok(GaussianMoments { mean, cov })
}

/// `θ(q_new) − θ(cavity)` by direct inversion.
pub fn site_from_moments(q_new: &GaussianMoments, cav: &GaussianMoments) -> Result<GaussianSite> {
    let a = GaussianSite::from_moments(q_new)?;
    let b = GaussianSite::from_moments(cav).map_err(|_| Error::CavityNotPd)?;
    Ok(a.plus(&b, -1.0))
}

/// `(1 − η)·g + η·θ̂`.
pub fn update_factor(g: &GaussianSite, site_hat: &GaussianSite, eta: f64) -> GaussianSite {
    g.scaled(1.0 - eta).plus(site_hat, eta)
}

/// Computes site estimates against one cavity without ever inverting it.
///
/// With `V = L Lᵀ`, `W = dm dmᵀ − 2 dV`, `F = W L` and `E = I − Lᵀ W L`,
/// the tilted covariance is `L E Lᵀ` and the site precision is
/// `W + F E⁻¹ Fᵀ`. `E` fails to factor exactly when the tilted covariance
/// is not positive definite.
pub struct SiteEstimator {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    l: DMatrix<f64>,
}

impl SiteEstimator {
    pub fn new(cav: &GaussianMoments) -> Result<Self> {
        let l = Cholesky::new(numerics::symmetrize(&cav.cov))
            .ok_or(Error::CavityNotPd)?
            .l();
        Ok(SiteEstimator {
            mean: cav.mean.clone(),
            cov: cav.cov.clone(),
            l,
        })
    }

    fn finish(&self, precision: DMatrix<f64>, dm: &DVector<f64>) -> Result<GaussianSite> {
        let m_new = &self.mean + &self.cov * dm;
        let eta1 = dm + &precision * m_new;
        let site = GaussianSite { eta1, eta2: precision };
        if !site.is_finite() {
            return Err(Error::MomentsNotPd);
        }
        Ok(site)
    }

    pub fn estimate(&self, dm: &DVector<f64>, dv: &DMatrix<f64>) -> Result<GaussianSite> {
        let w = numerics::symmetrize(&(dm * dm.transpose() - dv * 2.0));
        let f = &w * &self.l;
        let mut e = -(self.l.transpose() * &f);
        e = numerics::symmetrize(&e);
        for i in 0..e.nrows() {
            e[(i, i)] += 1.0;
        }
        let chol = Cholesky::new(e).ok_or(Error::MomentsNotPd)?;
        let ft = f.transpose();
        let precision = numerics::symmetrize(&(w + &f * chol.solve(&ft)));
        self.finish(precision, dm)
    }

    /// Special case `dm = β·c`, `dV = γ·c cᵀ`, as produced by an observed
    /// input. With `α = β² − 2γ` the site precision is `α c cᵀ / (1 − α cᵀVc)`.
    pub fn estimate_rank_one(&self, c: &DVector<f64>, beta: f64, gamma: f64) -> Result<GaussianSite> {
        let alpha = beta * beta - 2.0 * gamma;
        let vc = &self.cov * c;
        let denom = 1.0 - alpha * c.dot(&vc);
        if !(denom > 0.0) {
            return Err(Error::MomentsNotPd);
        }
        let precision = c * c.transpose() * (alpha / denom);
        self.finish(precision, &(c * beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_site(eta1: f64, prec: f64) -> GaussianSite {
        GaussianSite {
            eta1: DVector::from_element(1, eta1),
            eta2: DMatrix::from_element(1, 1, prec),
        }
    }

    fn random_gaussian(rng: &mut ChaCha8Rng, m: usize) -> GaussianMoments {
        let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let mut cov = &g * g.transpose();
        for i in 0..m {
            cov[(i, i)] += 0.2;
        }
        GaussianMoments::new(DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)), cov).unwrap()
    }

    #[test]
    fn cavity_examples() {
        let g = GaussianSite::zero(1);
        let q = scalar_site(0.4, 2.0);
        let c = cavity(&q, &g).unwrap();
        assert!((c.cov[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((c.mean[0] - 0.2).abs() < 1e-15);

        let c = cavity(&q, &scalar_site(0.0, 0.5)).unwrap();
        assert!((1.0 / c.cov[(0, 0)] - 1.5).abs() < 1e-14);

        assert!(matches!(cavity(&q, &scalar_site(0.0, 3.0)), Err(Error::CavityNotPd)));
    }

    #[test]
    fn zero_derivatives_keep_cavity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cav = random_gaussian(&mut rng, 3);
        let out = moment_match(&cav, &DVector::zeros(3), &DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(out.mean, cav.mean);
        assert!((out.cov - &cav.cov).amax() < 1e-15);
    }

    #[test]
    fn scalar_conjugate_example() {
        let cav = GaussianMoments::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let out = moment_match(&cav, &DVector::from_element(1, 0.5), &DMatrix::from_element(1, 1, -0.125)).unwrap();
        assert!((out.mean[0] - 0.5).abs() < 1e-12);
        assert!((out.cov[(0, 0)] - 0.5).abs() < 1e-12);
    }

    /// Cavity `N(m, V)`, likelihood `N(y; aᵀu, r)`: log Z derivatives and
    /// the exact posterior in closed form.
    fn conjugate_case(rng: &mut ChaCha8Rng, m: usize) -> (GaussianMoments, DVector<f64>, DMatrix<f64>, GaussianMoments) {
        let cav = random_gaussian(rng, m);
        let a = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let r = rng.random_range(0.1..2.0);
        let y = rng.random_range(-2.0..2.0);
        let s = r + a.dot(&(&cav.cov * &a));
        let resid = y - a.dot(&cav.mean);
        let dm = &a * (resid / s);
        let dv = &a * a.transpose() * (0.5 * (resid * resid / (s * s) - 1.0 / s));
        let va = &cav.cov * &a;
        let post = GaussianMoments {
            mean: &cav.mean + &va * (resid / s),
            cov: &cav.cov - &va * va.transpose() / s,
        };
        (cav, dm, dv, post)
    }

    #[test]
    fn conjugate_cases_match_exact_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..200 {
            let m = if case % 2 == 0 { 1 } else { 5 };
            let (cav, dm, dv, post) = conjugate_case(&mut rng, m);
            let out = moment_match(&cav, &dm, &dv).unwrap();
            assert!((&out.mean - &post.mean).amax() < 1e-10);
            assert!((&out.cov - &post.cov).amax() < 1e-10);
        }
    }

    #[test]
    fn stable_site_matches_direct_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (cav, dm, dv, _) = conjugate_case(&mut rng, 4);
            let est = SiteEstimator::new(&cav).unwrap();
            let stable = est.estimate(&dm, &dv).unwrap();
            let direct = site_from_moments(&moment_match(&cav, &dm, &dv).unwrap(), &cav).unwrap();
            let scale = direct.eta2.amax().max(direct.eta1.amax()).max(1.0);
            assert!(stable.max_abs_diff(&direct) < 1e-8 * scale);
        }
    }

    #[test]
    fn rank_one_matches_general() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let cav = random_gaussian(&mut rng, 5);
            let c = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
            // derivatives of log N(y; cᵀu, r) at the cavity
            let r = rng.random_range(0.1..1.0);
            let s = r + c.dot(&(&cav.cov * &c));
            let beta = rng.random_range(-2.0..2.0) / s;
            let gamma = 0.5 * (beta * beta - 1.0 / s);
            let est = SiteEstimator::new(&cav).unwrap();
            let general = est.estimate(&(&c * beta), &(&c * c.transpose() * gamma)).unwrap();
            let fast = est.estimate_rank_one(&c, beta, gamma).unwrap();
            assert!(general.max_abs_diff(&fast) < 1e-9 * general.eta2.amax().max(1.0));
        }
    }

    #[test]
    fn indefinite_tilted_covariance_is_rejected() {
        let cav = GaussianMoments::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let dm = DVector::from_element(1, 0.0);
        let dv = DMatrix::from_element(1, 1, -1.0);
        assert!(moment_match(&cav, &dm, &dv).is_err());
        assert!(SiteEstimator::new(&cav).unwrap().estimate(&dm, &dv).is_err());
    }

    #[test]
    fn update_factor_examples() {
        let g = scalar_site(0.0, 0.2);
        let hat = scalar_site(0.0, 0.4);
        let out = update_factor(&g, &hat, 0.5);
        assert!((out.eta2[(0, 0)] - 0.3).abs() < 1e-15);
        // fixed point
        assert!((update_factor(&g, &g, 0.3).eta2[(0, 0)] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn damping_defaults() {
        let c = SepConfig::default();
        assert_eq!(c.step_size(200), 1.0 / 200.0);
        assert_eq!(c.minibatch_step(50, 50), 1.0);
        assert!((c.minibatch_step(200, 50) - 0.25).abs() < 1e-15);
        assert!(SepConfig { damping: Some(0.0), ..c }.validate().is_err());
        assert!(SepConfig { damping: Some(1.5), ..c }.validate().is_err());
    }
}
