//! Oracle-backed verification suites, shared by `sepdgp verify` and the
//! acceptance tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Standardizer;
use crate::error::Result;
use crate::kernel::{self, KernelParams, MomentBelief};
use crate::layer::{GaussianMoments, SparseGpLayer};
use crate::network::{self, Beliefs, DgpModel, ModelGrads};
use crate::oracle;
use crate::sep;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Knobs shared by the suites.
#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub psi_samples: usize,
    pub log_z_samples: usize,
    /// Width of Monte-Carlo acceptance bands, in standard errors.
    pub band: f64,
    /// Adds 0.1 to every analytic ψ1 entry before comparison.
    pub psi1_fault: f64,
}

impl VerifyOptions {
    pub fn full(seed: u64) -> Self {
        VerifyOptions {
            seed,
            psi_samples: 1_000_000,
            log_z_samples: 1_000_000,
            band: 3.0,
            psi1_fault: 0.0,
        }
    }

    pub fn quick(seed: u64) -> Self {
        VerifyOptions {
            psi_samples: 10_000,
            log_z_samples: 10_000,
            ..Self::full(seed)
        }
    }
}

fn z_score(analytic: f64, est: &oracle::McEstimate) -> f64 {
    let diff = (analytic - est.value).abs();
    if est.standard_error > 0.0 {
        diff / est.standard_error
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Configuration `i` of the ψ suite: `D ∈ {1,2,5}`, `M ∈ {1,3,10}`.
pub fn psi_config(i: usize, rng: &mut ChaCha8Rng) -> (KernelParams, DMatrix<f64>, MomentBelief) {
    let d = [1, 2, 5][i % 3];
    let m = [1, 3, 10][(i / 3) % 3];
    let ls: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    let p = KernelParams::new(rng.random_range(0.5..2.0), &ls);
    let mean = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let var = DVector::from_fn(d, |_, _| rng.random_range(0.05..1.0));
    let z = DMatrix::from_fn(m, d, |_, k| mean[k] + rng.random_range(-1.5..1.5));
    (p, z, MomentBelief { mean, variance: var })
}

/// Analytic ψ-statistics against Monte Carlo on 20 configurations.
pub fn psi_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checks = Vec::new();
    for i in 0..20 {
        let (p, z, q) = psi_config(i, &mut rng);
        let psi0 = kernel::psi0(&p, &q);
        let mut psi1 = kernel::psi1(&p, &z, &q)?;
        psi1.add_scalar_mut(opts.psi1_fault);
        let psi2 = kernel::psi2(&p, &z, &q)?;
        let mc = oracle::mc_psi(&p, &z, &q, opts.psi_samples, opts.seed.wrapping_add(1000 + i as u64))?;
        let m = z.nrows();
        let worst1 = (0..m).map(|a| z_score(psi1[a], &mc.psi1[a])).fold(0.0, f64::max);
        let worst2 = (0..m)
            .flat_map(|a| (0..m).map(move |b| (a, b)))
            .map(|(a, b)| z_score(psi2[(a, b)], mc.psi2_at(a, b)))
            .fold(0.0, f64::max);
        let psi0_exact = psi0 == p.log_sf2.exp();
        let passed = psi0_exact && worst1 <= opts.band && worst2 <= opts.band;
        checks.push(Check::new(
            "psi-mc",
            format!("config {i} (D={}, M={m})", z.ncols()),
            passed,
            format!("psi0 exact {psi0_exact}; max |z| psi1 {worst1:.2}, psi2 {worst2:.2}"),
        ));
    }
    Ok(checks)
}

fn random_moments(rng: &mut ChaCha8Rng, k: &DMatrix<f64>, mean_scale: f64, cov_scale: f64) -> GaussianMoments {
    let m = k.nrows();
    let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let mut cov = k * cov_scale + &g * g.transpose() * (0.1 * cov_scale);
    cov = (&cov + cov.transpose()) * 0.5;
    let alpha = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0) * mean_scale);
    GaussianMoments::new(k * alpha, cov).unwrap()
}

/// A two-layer network where layer 2 is close to linear over the spread of
/// the hidden activation: its lengthscale is `ratio` times the hidden
/// standard deviation.
pub fn near_linear_config(rng: &mut ChaCha8Rng, ratio: f64) -> Result<(DgpModel, Beliefs, Vec<f64>, f64)> {
    let din = rng.random_range(1..=2);
    let m1 = rng.random_range(2..=4);
    let ls1: Vec<f64> = (0..din).map(|_| rng.random_range(0.8..1.5)).collect();
    let z1 = DMatrix::from_fn(m1, din, |i, _| -1.0 + 2.0 * i as f64 / (m1 - 1) as f64 + rng.random_range(-0.2..0.2));
    let l1 = SparseGpLayer::new(z1, KernelParams::new(rng.random_range(0.5..1.5), &ls1), 0.05f64.ln(), 1)?;
    let k1 = l1.kzz()?;
    let b1 = vec![random_moments(rng, &k1, 0.5, 0.3)];
    let x: Vec<f64> = (0..din).map(|_| rng.random_range(-0.8..0.8)).collect();
    let h = crate::layer::propagate_point(&l1, &b1, &x)?;
    let ell2 = ratio * h.variance[0].sqrt();
    let m2 = rng.random_range(2..=4);
    let z2 = DMatrix::from_fn(m2, 1, |i, _| {
        h.mean[0] + ell2 * (-1.5 + 3.0 * i as f64 / (m2 - 1) as f64)
    });
    let l2 = SparseGpLayer::new(z2, KernelParams::new(rng.random_range(0.5..1.5), &[ell2]), 0.1f64.ln(), 1)?;
    let k2 = l2.kzz()?;
    let b2 = vec![random_moments(rng, &k2, 0.5, 0.05)];
    let model = DgpModel::new(vec![l1, l2], Standardizer::identity(din))?;
    let top = network::forward_moments(&model, &[b1.clone(), b2.clone()], &x)?;
    let y = top.mean[0] + rng.random_range(-1.0..1.0) * top.variance[0].sqrt();
    Ok((model, vec![b1, b2], x, y))
}

/// Analytic two-layer log Z against Monte Carlo in the near-linear regime.
pub fn log_z_suite(opts: &VerifyOptions, ratio: f64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut checks = Vec::new();
    for i in 0..10 {
        let (model, beliefs, x, y) = near_linear_config(&mut rng, ratio)?;
        let analytic = network::log_z(&model, &beliefs, &x, y)?;
        let mc = oracle::mc_log_z(&model.layers, &beliefs, &x, y, opts.log_z_samples, opts.seed.wrapping_add(2000 + i))?;
        let z = z_score(analytic, &mc);
        checks.push(Check::new(
            "logz-mc",
            format!("config {i}"),
            z <= opts.band,
            format!("analytic {analytic:.6}, MC {:.6} ± {:.2e}, |z| {z:.2}", mc.value, mc.standard_error),
        ));
    }
    Ok(checks)
}

/// Random two-layer network with well-separated inducing inputs.
pub fn random_two_layer(rng: &mut ChaCha8Rng) -> Result<(DgpModel, Beliefs, Vec<f64>, f64)> {
    let din = rng.random_range(1..=3);
    let dh = rng.random_range(1..=2);
    let m1 = rng.random_range(2..=5);
    let m2 = rng.random_range(2..=5);
    let ls1: Vec<f64> = (0..din).map(|_| rng.random_range(0.8..2.0)).collect();
    let ls2: Vec<f64> = (0..dh).map(|_| rng.random_range(0.8..2.0)).collect();
    // Neighbouring inducing inputs sit at least one lengthscale apart along
    // the first axis.
    let grid = |m: usize, ls: &[f64], rng: &mut ChaCha8Rng| {
        DMatrix::from_fn(m, ls.len(), |i, k| {
            let base = if k == 0 { (i as f64 - 0.5 * (m - 1) as f64) * 1.2 } else { 0.0 };
            (base + rng.random_range(-0.1..0.1)) * ls[k]
        })
    };
    let l1 = SparseGpLayer::new(
        grid(m1, &ls1, rng),
        KernelParams::new(rng.random_range(0.5..1.5), &ls1),
        rng.random_range(0.02f64..0.2).ln(),
        dh,
    )?;
    let l2 = SparseGpLayer::new(
        grid(m2, &ls2, rng),
        KernelParams::new(rng.random_range(0.5..1.5), &ls2),
        rng.random_range(0.05f64..0.3).ln(),
        1,
    )?;
    let k1 = l1.kzz()?;
    let k2 = l2.kzz()?;
    let b1: Vec<_> = (0..dh).map(|_| random_moments(rng, &k1, 1.0, 0.5)).collect();
    let b2 = vec![random_moments(rng, &k2, 1.0, 0.5)];
    let x: Vec<f64> = (0..din).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = rng.random_range(-1.5..1.5);
    let model = DgpModel::new(vec![l1, l2], Standardizer::identity(din))?;
    Ok((model, vec![b1, b2], x, y))
}

fn pack(model: &DgpModel, beliefs: &Beliefs) -> Vec<f64> {
    let mut v = model.params();
    for b in beliefs.iter().flatten() {
        v.extend(b.mean.iter());
        v.extend(b.cov.iter());
    }
    v
}

fn unpack(model: &DgpModel, beliefs: &Beliefs, v: &[f64]) -> (DgpModel, Beliefs) {
    let mut m = model.clone();
    let np = m.n_params();
    m.set_params(&v[..np]).expect("length checked by caller");
    let mut off = np;
    let mut out = beliefs.clone();
    for b in out.iter_mut().flatten() {
        let k = b.mean.len();
        b.mean.copy_from_slice(&v[off..off + k]);
        off += k;
        b.cov.copy_from_slice(&v[off..off + k * k]);
        off += k * k;
    }
    (m, out)
}

fn flatten(g: &ModelGrads) -> Vec<f64> {
    let mut v = g.param_vector();
    for l in &g.layers {
        for (dm, dv) in l.d_mean.iter().zip(&l.d_cov) {
            v.extend(dm.iter());
            v.extend(dv.iter());
        }
    }
    v
}

/// `grad_log_z` against central differences on 10 two-layer networks.
/// Coordinates with `|grad| < 1e-6` are compared absolutely at 1e-8.
pub fn gradient_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let mut checks = Vec::new();
    for i in 0..10 {
        let (model, beliefs, x, y) = random_two_layer(&mut rng)?;
        let (_, g) = network::grad_log_z(&model, &beliefs, &x, y)?;
        let analytic = flatten(&g);
        let numeric = oracle::fd_grad(
            |v| {
                let (m, b) = unpack(&model, &beliefs, v);
                network::log_z(&m, &b, &x, y).unwrap_or(f64::NAN)
            },
            &pack(&model, &beliefs),
            1e-5,
        )?;
        let mut worst_rel = 0.0f64;
        let mut failures = 0;
        for (a, n) in analytic.iter().zip(&numeric) {
            let err = (a - n).abs();
            let ok = if a.abs() < 1e-6 { err <= 1e-8 } else { err <= 1e-4 * a.abs() };
            if a.abs() >= 1e-6 {
                worst_rel = worst_rel.max(err / a.abs());
            }
            if !ok {
                failures += 1;
            }
        }
        checks.push(Check::new(
            "gradient-fd",
            format!("config {i} ({} coordinates)", analytic.len()),
            failures == 0 && analytic.len() == numeric.len(),
            format!("{failures} failing coordinates, worst relative error {worst_rel:.2e}"),
        ));
    }
    Ok(checks)
}

/// Moment matching on Gaussian likelihoods against exact conditioning.
pub fn conjugate_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let cav = GaussianMoments::new(DVector::zeros(1), DMatrix::identity(1, 1))?;
    let out = sep::moment_match(&cav, &DVector::from_element(1, 0.5), &DMatrix::from_element(1, 1, -0.125))?;
    let err = (out.mean[0] - 0.5).abs().max((out.cov[(0, 0)] - 0.5).abs());
    checks.push(Check::new(
        "sep-conjugate",
        "scalar N(0,1) with N(1; u, 1)",
        err <= 1e-12,
        format!("error {err:.2e}"),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let mut worst = 0.0f64;
    for case in 0..100 {
        let m = if case % 2 == 0 { 1 } else { 5 };
        let g = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let mut v = &g * g.transpose();
        for i in 0..m {
            v[(i, i)] += 0.2;
        }
        let cav = GaussianMoments::new(DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)), v)?;
        let a = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let r = rng.random_range(0.1..2.0);
        let y = rng.random_range(-2.0..2.0);
        let s = r + a.dot(&(&cav.cov * &a));
        let resid = y - a.dot(&cav.mean);
        let dm = &a * (resid / s);
        let dv = &a * a.transpose() * (0.5 * (resid * resid / (s * s) - 1.0 / s));
        let va = &cav.cov * &a;
        let exact_mean = &cav.mean + &va * (resid / s);
        let exact_cov = &cav.cov - &va * va.transpose() / s;
        let out = sep::moment_match(&cav, &dm, &dv)?;
        worst = worst
            .max((&out.mean - exact_mean).amax())
            .max((&out.cov - exact_cov).amax());
    }
    checks.push(Check::new(
        "sep-conjugate",
        "100 random conjugate updates (M = 1, 5)",
        worst <= 1e-10,
        format!("max error {worst:.2e}"),
    ));
    Ok(checks)
}

/// Closed-form Gaussian marginal of one FITC datapoint, written out with
/// plain matrix algebra.
pub fn fitc_marginal(layer: &SparseGpLayer, belief: &GaussianMoments, x: &[f64], y: f64) -> Result<f64> {
    let kzz = layer.kzz()?;
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let kxz = kernel::gram(&layer.kernel, &xm, &layer.z)?.transpose();
    let kinv = kzz.clone().try_inverse().ok_or(crate::Error::MomentsNotPd)?;
    let c = &kinv * &kxz;
    let mean = c.dot(&belief.mean);
    let var = layer.noise() + layer.kernel.sf2() - kxz.dot(&c) + c.dot(&(&belief.cov * &c));
    Ok(network::log_normal(y, mean, var))
}

/// Exact FITC posterior predictive moments of a one-layer model at the rows
/// of `xt`, given standardized training data.
pub fn fitc_predictive(
    model: &DgpModel,
    xs: &DMatrix<f64>,
    ys: &DVector<f64>,
    xt: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let layer = &model.layers[0];
    let kzz = layer.kzz()?;
    let kinv = kzz.clone().try_inverse().ok_or(crate::Error::MomentsNotPd)?;
    let kxz = kernel::gram(&layer.kernel, xs, &layer.z)?;
    let mut precision = kinv.clone();
    let mut eta = DVector::zeros(kzz.nrows());
    for n in 0..xs.nrows() {
        let k = kxz.row(n).transpose();
        let c = &kinv * &k;
        let r = layer.noise() + layer.kernel.sf2() - k.dot(&c);
        precision += &c * c.transpose() / r;
        eta += &c * (ys[n] / r);
    }
    let cov = precision.try_inverse().ok_or(crate::Error::PosteriorNotPd)?;
    let mean = &cov * eta;
    let ktz = kernel::gram(&layer.kernel, xt, &layer.z)?;
    let mut means = Vec::with_capacity(xt.nrows());
    let mut vars = Vec::with_capacity(xt.nrows());
    for t in 0..xt.nrows() {
        let k = ktz.row(t).transpose();
        let c = &kinv * &k;
        means.push(c.dot(&mean));
        vars.push(layer.noise() + layer.kernel.sf2() - k.dot(&c) + c.dot(&(&cov * &c)));
    }
    Ok((means, vars))
}

/// Single-layer `log Z` against the closed-form marginal on 100 configurations.
pub fn single_layer_suite(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4));
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (model, beliefs, x, y) = random_two_layer(&mut rng)?;
        let layer = SparseGpLayer {
            output_dim: 1,
            ..model.layers[0].clone()
        };
        let single = DgpModel::new(vec![layer.clone()], Standardizer::identity(layer.input_dim))?;
        let b = vec![vec![beliefs[0][0].clone()]];
        let analytic = network::log_z(&single, &b, &x, y)?;
        let exact = fitc_marginal(&layer, &b[0][0], &x, y)?;
        worst = worst.max((analytic - exact).abs());
    }
    Ok(vec![Check::new(
        "single-layer",
        "log Z equals the closed-form FITC marginal (100 configs)",
        worst <= 1e-9,
        format!("max |difference| {worst:.2e}"),
    )])
}

/// Lengthscale-to-hidden-spread ratio used by the near-linear log Z suite.
pub const NEAR_LINEAR_RATIO: f64 = 10.0;

pub fn run_all(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut all = psi_suite(opts)?;
    all.extend(log_z_suite(opts, NEAR_LINEAR_RATIO)?);
    all.extend(gradient_suite(opts)?);
    all.extend(conjugate_suite(opts)?);
    all.extend(single_layer_suite(opts)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        let opts = VerifyOptions::quick(0);
        let checks = run_all(&opts).unwrap();
        for c in &checks {
            assert!(c.passed, "{} {}: {}", c.suite, c.name, c.detail);
        }
    }

    #[test]
    fn injected_psi1_fault_is_caught() {
        let opts = VerifyOptions {
            psi1_fault: 0.1,
            ..VerifyOptions::quick(0)
        };
        assert!(psi_suite(&opts).unwrap().iter().any(|c| !c.passed));
    }
}
