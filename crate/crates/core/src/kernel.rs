//! RBF-ARD kernel and its expectations under diagonal Gaussian inputs.
//!
//! Convention: `k(x, x') = σ_f² · exp(−½ Σ_d (x_d − x'_d)² / ℓ_d²)`, with
//! `log σ_f²` and `log ℓ_d` as the free parameters.
//!
//! For an input belief `h ~ N(μ, diag(s))` and inducing inputs `z_m`:
//!
//! ```text
//! ψ0      = E[k(h, h)]                 = σ_f²
//! ψ1[m]   = E[k(h, z_m)]               = σ_f² Π_d (1 + s_d/ℓ_d²)^(-1/2) exp(−½ (μ_d − z_md)² / (ℓ_d² + s_d))
//! ψ2[m,n] = E[k(z_m, h) k(h, z_n)]     = σ_f⁴ Π_d (1 + 2s_d/ℓ_d²)^(-1/2)
//!                                          · exp(−(z_md − z_nd)² / (4ℓ_d²) − (μ_d − z̄_d)² / (ℓ_d² + 2s_d))
//! ```
//!
//! where `z̄ = (z_m + z_n)/2`. At `s = 0` these collapse to kernel values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_sf2: f64,
    pub log_lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(sf2: f64, lengthscales: &[f64]) -> Self {
        KernelParams {
            log_sf2: sf2.ln(),
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
        }
    }

    pub fn sf2(&self) -> f64 {
        self.log_sf2.exp()
    }

    pub fn input_dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    /// Squared lengthscales `ℓ_d²`.
    pub fn lengthscales_sq(&self) -> Vec<f64> {
        self.log_lengthscales
            .iter()
            .map(|l| (2.0 * l).exp())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.log_sf2.is_finite() && self.log_lengthscales.iter().all(|l| l.is_finite())
    }
}

/// Diagonal Gaussian belief over a (hidden) input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentBelief {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl MomentBelief {
    pub fn new(mean: DVector<f64>, variance: DVector<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::shape(format!(
                "belief mean has {} entries, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if variance.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "belief variance must be finite and non-negative".into(),
            ));
        }
        Ok(MomentBelief { mean, variance })
    }

    /// Delta belief at `x`.
    pub fn point(x: &[f64]) -> Self {
        MomentBelief {
            mean: DVector::from_column_slice(x),
            variance: DVector::zeros(x.len()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_dim(p: &KernelParams, d: usize, what: &str) -> Result<()> {
    if p.input_dim() != d {
        return Err(Error::shape(format!(
            "{what} has dimension {d}, kernel expects {}",
            p.input_dim()
        )));
    }
    Ok(())
}

pub fn kernel_eval(p: &KernelParams, x: &[f64], x2: &[f64]) -> Result<f64> {
    check_dim(p, x.len(), "first input")?;
    check_dim(p, x2.len(), "second input")?;
    let l2 = p.lengthscales_sq();
    let r2: f64 = x
        .iter()
        .zip(x2)
        .zip(&l2)
        .map(|((a, b), l)| (a - b) * (a - b) / l)
        .sum();
    Ok(p.sf2() * (-0.5 * r2).exp())
}

/// Kernel matrix between the rows of `x` and the rows of `x2`.
pub fn gram(p: &KernelParams, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(p, x.ncols(), "first input matrix")?;
    check_dim(p, x2.ncols(), "second input matrix")?;
    let l2 = p.lengthscales_sq();
    let sf2 = p.sf2();
    let d = x.ncols();
    Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
        let mut r2 = 0.0;
        for k in 0..d {
            let diff = x[(i, k)] - x2[(j, k)];
            r2 += diff * diff / l2[k];
        }
        sf2 * (-0.5 * r2).exp()
    }))
}

/// `gram(Z, Z) + jitter·σ_f²·I`: the inducing-point prior covariance.
pub fn inducing_covariance(p: &KernelParams, z: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let mut k = gram(p, z, z)?;
    let extra = jitter * p.sf2();
    for i in 0..k.nrows() {
        k[(i, i)] += extra;
    }
    Ok(k)
}

pub fn psi0(p: &KernelParams, _q: &MomentBelief) -> f64 {
    p.sf2()
}

pub fn psi1(p: &KernelParams, z: &DMatrix<f64>, q: &MomentBelief) -> Result<DVector<f64>> {
    check_dim(p, z.ncols(), "inducing inputs")?;
    check_dim(p, q.dim(), "input belief")?;
    let l2 = p.lengthscales_sq();
    let d = z.ncols();
    let den: Vec<f64> = (0..d).map(|k| l2[k] + q.variance[k]).collect();
    let log_pref = p.log_sf2
        - 0.5
            * (0..d)
                .map(|k| (q.variance[k] / l2[k]).ln_1p())
                .sum::<f64>();
    Ok(DVector::from_fn(z.nrows(), |m, _| {
        let mut e = 0.0;
        for k in 0..d {
            let delta = q.mean[k] - z[(m, k)];
            e += delta * delta / den[k];
        }
        (log_pref - 0.5 * e).exp()
    }))
}

pub fn psi2(p: &KernelParams, z: &DMatrix<f64>, q: &MomentBelief) -> Result<DMatrix<f64>> {
    check_dim(p, z.ncols(), "inducing inputs")?;
    check_dim(p, q.dim(), "input belief")?;
    let l2 = p.lengthscales_sq();
    let d = z.ncols();
    let m = z.nrows();
    let den2: Vec<f64> = (0..d).map(|k| l2[k] + 2.0 * q.variance[k]).collect();
    let log_pref = 2.0 * p.log_sf2
        - 0.5
            * (0..d)
                .map(|k| (2.0 * q.variance[k] / l2[k]).ln_1p())
                .sum::<f64>();
    let mut out = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let mut e = 0.0;
            for k in 0..d {
                let diff = z[(a, k)] - z[(b, k)];
                let bar = q.mean[k] - 0.5 * (z[(a, k)] + z[(b, k)]);
                e += 0.25 * diff * diff / l2[k] + bar * bar / den2[k];
            }
            let v = (log_pref - e).exp();
            out[(a, b)] = v;
            out[(b, a)] = v;
        }
    }
    Ok(out)
}

/// All three ψ-statistics for one input belief.
#[derive(Clone, Debug)]
pub struct PsiStats {
    pub psi0: f64,
    pub psi1: DVector<f64>,
    pub psi2: DMatrix<f64>,
}

impl PsiStats {
    pub fn compute(p: &KernelParams, z: &DMatrix<f64>, q: &MomentBelief) -> Result<Self> {
        Ok(PsiStats {
            psi0: psi0(p, q),
            psi1: psi1(p, z, q)?,
            psi2: psi2(p, z, q)?,
        })
    }

    /// Statistics of a delta input: `ψ1 = k(x, Z)`, `ψ2 = ψ1 ψ1ᵀ`.
    pub fn point(p: &KernelParams, z: &DMatrix<f64>, x: &[f64]) -> Result<Self> {
        let psi1 = psi1(p, z, &MomentBelief::point(x))?;
        let psi2 = &psi1 * psi1.transpose();
        Ok(PsiStats {
            psi0: p.sf2(),
            psi1,
            psi2,
        })
    }
}

/// Gradients of a scalar objective with respect to kernel parameters,
/// inducing inputs and the input belief.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiGrads {
    pub log_sf2: f64,
    pub log_lengthscales: DVector<f64>,
    pub z: DMatrix<f64>,
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
}

impl PsiGrads {
    pub fn zeros(m: usize, d: usize) -> Self {
        PsiGrads {
            log_sf2: 0.0,
            log_lengthscales: DVector::zeros(d),
            z: DMatrix::zeros(m, d),
            mean: DVector::zeros(d),
            variance: DVector::zeros(d),
        }
    }
}

/// Vector-Jacobian product of the ψ-statistics.
///
/// Given `∂L/∂ψ0`, `∂L/∂ψ1` and `∂L/∂ψ2` (any of which may be absent), returns
/// `∂L` with respect to `log σ_f²`, `log ℓ`, `Z`, `q.mean` and `q.variance`.
/// `psi` must hold the statistics evaluated at the same arguments.
pub fn psi_grads(
    p: &KernelParams,
    z: &DMatrix<f64>,
    q: &MomentBelief,
    psi: &PsiStats,
    d_psi0: f64,
    d_psi1: Option<&DVector<f64>>,
    d_psi2: Option<&DMatrix<f64>>,
) -> PsiGrads {
    let m = z.nrows();
    let d = z.ncols();
    let l2 = p.lengthscales_sq();
    let mut g = PsiGrads::zeros(m, d);
    g.log_sf2 += d_psi0 * psi.psi0;

    if let Some(g1) = d_psi1 {
        let den: Vec<f64> = (0..d).map(|k| l2[k] + q.variance[k]).collect();
        for mi in 0..m {
            let w = g1[mi] * psi.psi1[mi];
            if w == 0.0 {
                continue;
            }
            g.log_sf2 += w;
            for k in 0..d {
                let delta = q.mean[k] - z[(mi, k)];
                let inv = 1.0 / den[k];
                let t = delta * inv;
                g.mean[k] -= w * t;
                g.z[(mi, k)] += w * t;
                g.variance[k] += w * 0.5 * (t * t - inv);
                g.log_lengthscales[k] += w * (q.variance[k] * inv + l2[k] * t * t);
            }
        }
    }

    if let Some(g2) = d_psi2 {
        let den2: Vec<f64> = (0..d).map(|k| l2[k] + 2.0 * q.variance[k]).collect();
        for a in 0..m {
            for b in 0..m {
                let w = g2[(a, b)] * psi.psi2[(a, b)];
                let s = w + g2[(b, a)] * psi.psi2[(b, a)];
                g.log_sf2 += 2.0 * w;
                for k in 0..d {
                    let diff = z[(a, k)] - z[(b, k)];
                    let bar = q.mean[k] - 0.5 * (z[(a, k)] + z[(b, k)]);
                    let inv = 1.0 / den2[k];
                    let t = bar * inv;
                    g.mean[k] -= 2.0 * w * t;
                    g.variance[k] += w * (2.0 * t * t - inv);
                    g.log_lengthscales[k] += w
                        * (0.5 * diff * diff / l2[k]
                            + 2.0 * q.variance[k] * inv
                            + 2.0 * l2[k] * t * t);
                    g.z[(a, k)] += s * (t - 0.5 * diff / l2[k]);
                }
            }
        }
    }
    g
}

/// Gradients flowing back through `inducing_covariance(p, z, jitter)`.
///
/// Returns `(∂L/∂log σ_f², ∂L/∂log ℓ, ∂L/∂Z)` given `∂L/∂K_zz` (not
/// necessarily symmetric) and the covariance itself.
pub fn inducing_covariance_grads(
    p: &KernelParams,
    z: &DMatrix<f64>,
    kzz: &DMatrix<f64>,
    d_kzz: &DMatrix<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let m = z.nrows();
    let d = z.ncols();
    let l2 = p.lengthscales_sq();
    let d_log_sf2 = d_kzz.component_mul(kzz).sum();
    let mut d_ls = DVector::zeros(d);
    let mut d_z = DMatrix::zeros(m, d);
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let k_ab = kzz[(a, b)];
            let w = d_kzz[(a, b)] * k_ab;
            let s = w + d_kzz[(b, a)] * k_ab;
            for k in 0..d {
                let diff = z[(a, k)] - z[(b, k)];
                d_ls[k] += w * diff * diff / l2[k];
                d_z[(a, k)] -= s * diff / l2[k];
            }
        }
    }
    (d_log_sf2, d_ls, d_z)
}
