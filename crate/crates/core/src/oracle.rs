//! Deliberately naive Monte-Carlo and finite-difference oracles.
//!
//! Nothing here calls the closed-form kernel, ψ-statistic or propagation
//! code: kernels are re-evaluated by hand from the raw parameters and every
//! Gaussian is sampled directly.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::{KernelParams, MomentBelief};
use crate::layer::{GaussianMoments, SparseGpLayer};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub standard_error: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl McEstimate {
    /// `|value − x| ≤ k·SE`.
    pub fn within(&self, x: f64, k: f64) -> bool {
        (self.value - x).abs() <= k * self.standard_error
    }
}

/// Welford running mean/variance.
#[derive(Clone, Copy, Default)]
struct Running {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn estimate(&self, seed: u64) -> McEstimate {
        let var = if self.n > 1 { self.m2 / (self.n - 1) as f64 } else { 0.0 };
        McEstimate {
            value: self.mean,
            standard_error: (var / self.n as f64).sqrt(),
            n_samples: self.n,
            seed,
        }
    }
}

fn naive_kernel(log_sf2: f64, log_ls: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for k in 0..a.len() {
        let l = log_ls[k].exp();
        let u = (a[k] - b[k]) / l;
        r2 += u * u;
    }
    log_sf2.exp() * (-0.5 * r2).exp()
}

/// Monte-Carlo estimates of ψ0, ψ1 and ψ2 (row-major `M×M`).
#[derive(Clone, Debug)]
pub struct McPsi {
    pub psi0: McEstimate,
    pub psi1: Vec<McEstimate>,
    pub psi2: Vec<McEstimate>,
}

impl McPsi {
    pub fn psi2_at(&self, a: usize, b: usize) -> &McEstimate {
        &self.psi2[a * self.psi1.len() + b]
    }
}

pub fn mc_psi(p: &KernelParams, z: &DMatrix<f64>, q: &MomentBelief, n_samples: usize, seed: u64) -> Result<McPsi> {
    if n_samples < 2 {
        return Err(Error::InvalidParameter("need at least 2 samples".into()));
    }
    let d = q.mean.len();
    if z.ncols() != d || p.log_lengthscales.len() != d {
        return Err(Error::shape("mc_psi dimension mismatch"));
    }
    let m = z.nrows();
    let zrows: Vec<Vec<f64>> = (0..m).map(|i| z.row(i).iter().copied().collect()).collect();
    let sd: Vec<f64> = q.variance.iter().map(|v| v.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r0 = Running::default();
    let mut r1 = vec![Running::default(); m];
    let mut r2 = vec![Running::default(); m * m];
    let mut h = vec![0.0; d];
    let mut k = vec![0.0; m];
    for _ in 0..n_samples {
        for j in 0..d {
            let e: f64 = StandardNormal.sample(&mut rng);
            h[j] = q.mean[j] + sd[j] * e;
        }
        r0.push(naive_kernel(p.log_sf2, &p.log_lengthscales, &h, &h));
        for i in 0..m {
            k[i] = naive_kernel(p.log_sf2, &p.log_lengthscales, &h, &zrows[i]);
            r1[i].push(k[i]);
        }
        for a in 0..m {
            for b in 0..m {
                r2[a * m + b].push(k[a] * k[b]);
            }
        }
    }
    Ok(McPsi {
        psi0: r0.estimate(seed),
        psi1: r1.iter().map(|r| r.estimate(seed)).collect(),
        psi2: r2.iter().map(|r| r.estimate(seed)).collect(),
    })
}

/// FITC conditional of one layer, rebuilt from scratch.
struct NaiveLayer {
    log_sf2: f64,
    log_ls: Vec<f64>,
    noise: f64,
    z: Vec<Vec<f64>>,
    kinv: DMatrix<f64>,
    /// Cholesky factors of the belief covariances, one per output dim.
    belief_l: Vec<DMatrix<f64>>,
    belief_m: Vec<DVector<f64>>,
}

impl NaiveLayer {
    fn new(layer: &SparseGpLayer, beliefs: &[GaussianMoments]) -> Result<Self> {
        let m = layer.z.nrows();
        let z: Vec<Vec<f64>> = (0..m).map(|i| layer.z.row(i).iter().copied().collect()).collect();
        let ls = &layer.kernel.log_lengthscales;
        let sf2 = layer.kernel.log_sf2.exp();
        let mut kzz = DMatrix::from_fn(m, m, |i, j| naive_kernel(layer.kernel.log_sf2, ls, &z[i], &z[j]));
        for i in 0..m {
            kzz[(i, i)] += layer.jitter * sf2;
        }
        let kinv = Cholesky::new(kzz).ok_or(Error::MomentsNotPd)?.inverse();
        let mut belief_l = Vec::new();
        let mut belief_m = Vec::new();
        for b in beliefs {
            let cov = (&b.cov + b.cov.transpose()) * 0.5;
            belief_l.push(Cholesky::new(cov).ok_or(Error::CavityNotPd)?.l());
            belief_m.push(b.mean.clone());
        }
        Ok(NaiveLayer {
            log_sf2: layer.kernel.log_sf2,
            log_ls: ls.clone(),
            noise: layer.log_noise.exp(),
            z,
            kinv,
            belief_l,
            belief_m,
        })
    }

    fn sample_u(&self, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
        self.belief_l
            .iter()
            .zip(&self.belief_m)
            .map(|(l, m)| {
                let e = DVector::from_fn(m.len(), |_, _| StandardNormal.sample(&mut *rng));
                m + l * e
            })
            .collect()
    }

    /// Conditional mean per output dim and the shared variance at `x`.
    fn conditional(&self, u: &[DVector<f64>], x: &[f64]) -> (Vec<f64>, f64) {
        let kx = DVector::from_iterator(
            self.z.len(),
            self.z.iter().map(|zi| naive_kernel(self.log_sf2, &self.log_ls, x, zi)),
        );
        let c = &self.kinv * &kx;
        let var = self.noise + self.log_sf2.exp() - kx.dot(&c);
        (u.iter().map(|ud| c.dot(ud)).collect(), var)
    }
}

fn normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    (-(y - mean) * (y - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Monte-Carlo estimate of `log Z` for a network of at most two layers.
///
/// Each sample draws inducing outputs for every layer from `beliefs`, a
/// hidden activation from the layer-1 conditional, and averages the
/// output-layer density of `y` (integrated analytically over the final
/// conditional). The standard error comes from the delta method.
pub fn mc_log_z(
    layers: &[SparseGpLayer],
    beliefs: &[Vec<GaussianMoments>],
    x: &[f64],
    y: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if layers.is_empty() || layers.len() > 2 {
        return Err(Error::InvalidParameter("mc_log_z supports one or two layers".into()));
    }
    if n_samples < 2 {
        return Err(Error::InvalidParameter("need at least 2 samples".into()));
    }
    let naive: Vec<NaiveLayer> = layers
        .iter()
        .zip(beliefs)
        .map(|(l, b)| NaiveLayer::new(l, b))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Running::default();
    for _ in 0..n_samples {
        let u1 = naive[0].sample_u(&mut rng);
        let (m1, v1) = naive[0].conditional(&u1, x);
        let density = if naive.len() == 1 {
            normal_pdf(y, m1[0], v1)
        } else {
            let sd = v1.max(0.0).sqrt();
            let h: Vec<f64> = m1
                .iter()
                .map(|m| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m + sd * e
                })
                .collect();
            let u2 = naive[1].sample_u(&mut rng);
            let (m2, v2) = naive[1].conditional(&u2, &h);
            normal_pdf(y, m2[0], v2)
        };
        acc.push(density);
    }
    let est = acc.estimate(seed);
    if !(est.value > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Monte-Carlo estimate of Z underflowed ({})",
            est.value
        )));
    }
    Ok(McEstimate {
        value: est.value.ln(),
        standard_error: est.standard_error / est.value,
        n_samples,
        seed,
    })
}

/// Central finite-difference gradient.
pub fn fd_grad<F: Fn(&[f64]) -> f64>(f: F, params: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut x = params.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let hi = f(&x);
        x[i] = orig - step;
        let lo = f(&x);
        x[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        g.push((hi - lo) / (2.0 * step));
    }
    Ok(g)
}
