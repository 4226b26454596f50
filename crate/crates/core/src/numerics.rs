//! Positive-semidefinite linear algebra: Cholesky with jitter escalation,
//! solves and log-determinants.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Relative symmetry tolerance accepted by [`chol_psd`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// How much diagonal jitter [`chol_psd`] may add before giving up.
///
/// The first attempt is always made without jitter. Failing that,
/// `initial_jitter * mean(diag(A))` is added and multiplied by
/// `growth_factor` on each of the `max_attempts` retries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterPolicy {
    pub initial_jitter: f64,
    pub growth_factor: f64,
    pub max_attempts: usize,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            initial_jitter: 1e-6,
            growth_factor: 10.0,
            max_attempts: 5,
        }
    }
}

impl JitterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_jitter > 0.0) {
            return Err(Error::InvalidParameter("initial_jitter must be > 0".into()));
        }
        if !(self.growth_factor > 1.0) {
            return Err(Error::InvalidParameter("growth_factor must be > 1".into()));
        }
        if self.max_attempts < 1 {
            return Err(Error::InvalidParameter("max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Lower Cholesky factor of `A + jitter·I`.
#[derive(Clone, Debug)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl CholFactor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Jitter that was added to the diagonal for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `(A + jitter·I)⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        symmetrize(&inv)
    }

    /// Solves `L X = B` for the lower factor.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        l.solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }
}

/// Largest absolute difference between `a` and its transpose, relative to its max entry.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst / scale
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Cholesky factorization of a symmetric matrix with multiplicative jitter
/// escalation.
pub fn chol_psd(a: &DMatrix<f64>, policy: &JitterPolicy) -> Result<CholFactor> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape(format!(
            "cholesky of non-square {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(CholFactor { chol, jitter: 0.0 });
    }

    let n = a.nrows();
    let mean_diag = if n == 0 { 1.0 } else { a.trace() / n as f64 };
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = policy.initial_jitter * base;
    for attempt in 0..policy.max_attempts {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(CholFactor { chol, jitter });
        }
        if attempt + 1 < policy.max_attempts {
            jitter *= policy.growth_factor;
        }
    }
    Err(Error::FactorizationFailed {
        attempts: policy.max_attempts + 1,
        last_jitter: jitter,
    })
}

/// `(A + jitter·I)⁻¹ B` through two triangular solves.
pub fn solve_psd(factor: &CholFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != factor.dim() {
        return Err(Error::shape(format!(
            "solve with {}x{} factor and {} right-hand rows",
            factor.dim(),
            factor.dim(),
            b.nrows()
        )));
    }
    Ok(factor.chol.solve(b))
}

pub fn logdet_psd(factor: &CholFactor) -> f64 {
    2.0 * factor
        .chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

/// Cheap PD test: plain Cholesky with no jitter.
pub fn is_pd(a: &DMatrix<f64>) -> bool {
    Cholesky::new(symmetrize(a)).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let mut a = &g * g.transpose();
        for i in 0..n {
            a[(i, i)] += 0.5;
        }
        symmetrize(&a)
    }

    #[test]
    fn identity_factor_without_jitter() {
        let f = chol_psd(&DMatrix::identity(3, 3), &JitterPolicy::default()).unwrap();
        assert_eq!(f.jitter(), 0.0);
        assert_eq!(f.l(), DMatrix::identity(3, 3));
    }

    #[test]
    fn two_by_two_closed_form() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert!((f.l() - expected).amax() < 1e-15);
        assert_eq!(f.jitter(), 0.0);
    }

    #[test]
    fn indefinite_fails() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        match chol_psd(&a, &JitterPolicy::default()) {
            Err(Error::FactorizationFailed { .. }) => {}
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
        assert!(f.jitter() > 0.0);
        let l = f.l();
        let mut shifted = a.clone();
        for i in 0..3 {
            shifted[(i, i)] += f.jitter();
        }
        assert!((&l * l.transpose() - shifted).amax() <= 1e-10 * a.amax());
    }

    #[test]
    fn asymmetric_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(matches!(
            chol_psd(&a, &JitterPolicy::default()),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn policy_validation() {
        assert!(JitterPolicy::default().validate().is_ok());
        let bad = JitterPolicy {
            growth_factor: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let policy = JitterPolicy::default();
        let b = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]);
        let f = chol_psd(&DMatrix::identity(2, 2), &policy).unwrap();
        assert_eq!(solve_psd(&f, &b).unwrap(), b);

        let d = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let f = chol_psd(&d, &policy).unwrap();
        let x = solve_psd(&f, &DMatrix::identity(2, 2)).unwrap();
        assert!((x[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((x[(1, 1)] - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(x[(0, 1)], 0.0);
        assert!(solve_psd(&f, &DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn solve_residual_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_psd(5, &mut rng);
            let b = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-2.0..2.0));
            let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
            let x = solve_psd(&f, &b).unwrap();
            assert!((&a * x - &b).amax() < 1e-8 * b.amax());
        }
    }

    #[test]
    fn logdet_cases() {
        let policy = JitterPolicy::default();
        let f = chol_psd(&DMatrix::identity(4, 4), &policy).unwrap();
        assert_eq!(logdet_psd(&f), 0.0);
        let d = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let f = chol_psd(&d, &policy).unwrap();
        assert!((logdet_psd(&f) - 36f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn logdet_matches_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_psd(6, &mut rng);
            let eig = SymmetricEigen::new(a.clone());
            let oracle: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
            let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
            assert!((logdet_psd(&f) - oracle).abs() < 1e-10 * oracle.abs().max(1.0));
        }
    }

    proptest::proptest! {
        #[test]
        fn factor_reconstructs_input(seed in 0u64..500, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_psd(n, &mut rng);
            let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
            let l = f.l();
            let mut target = a.clone();
            for i in 0..n { target[(i, i)] += f.jitter(); }
            proptest::prop_assert!((&l * l.transpose() - target).amax() <= 1e-10 * a.amax());
        }

        #[test]
        fn logdet_of_diagonal_is_sum_of_logs(diag in proptest::collection::vec(0.01f64..100.0, 1..10)) {
            let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag.clone()));
            let f = chol_psd(&a, &JitterPolicy::default()).unwrap();
            let expected: f64 = diag.iter().map(|d| d.ln()).sum();
            proptest::prop_assert!((logdet_psd(&f) - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }
}
