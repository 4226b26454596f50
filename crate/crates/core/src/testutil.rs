//! Random configurations shared by unit tests.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Inducing inputs at least half a lengthscale apart (in scaled distance),
/// so that `K_zz` stays reasonably conditioned.
pub fn spread_inducing(rng: &mut ChaCha8Rng, m: usize, lengthscales: &[f64]) -> DMatrix<f64> {
    let d = lengthscales.len();
    let half_width = 0.4 * m as f64 + 0.6;
    loop {
        let z = DMatrix::from_fn(m, d, |_, _| rng.random_range(-half_width..half_width));
        let ok = (0..m).all(|i| {
            (0..i).all(|j| {
                let r2: f64 = (0..d)
                    .map(|k| ((z[(i, k)] - z[(j, k)]) / lengthscales[k]).powi(2))
                    .sum();
                r2 >= 0.25
            })
        });
        if ok {
            return z;
        }
    }
}
