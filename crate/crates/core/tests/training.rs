use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sepdgp::arch::Architecture;
use sepdgp::network;
use sepdgp::state::InferenceState;
use sepdgp::trainer::{self, TrainConfig};
use sepdgp::verify;

fn sine(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::<f64>::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
    let f = DVector::from_fn(n, |i, _| x[(i, 0)].sin());
    let y = DVector::from_fn(n, |i, _| f[i] + 0.1 * rng.sample::<f64, _>(StandardNormal));
    (x, y, f)
}

fn sine_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        architecture: Architecture::shallow(20),
        seed: 0,
        learning_rate: 0.01,
        ..TrainConfig::default()
    }
}

#[test]
fn sine_regression_reaches_target_rmse() {
    let (x, y, _) = sine(200, 0);
    let out = trainer::train(&x, &y, &sine_config(2000)).unwrap();
    let (xt, _, ft) = sine(500, 1);
    let pred = network::predict(&out.model, &out.state, &xt).unwrap();
    let rmse = (pred.mean.iter().zip(ft.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 500.0).sqrt();
    assert!(rmse <= 0.15, "rmse {rmse}");
    let floor = out.model.layers[0].noise();
    assert!(pred.var_std.iter().all(|&v| v >= floor));
}

/// The 100-iteration moving average of mean log Z over the first 1000
/// iterations. Once converged it only fluctuates, so a violation is a fall
/// below the best average so far by more than two standard errors of a
/// 100-iteration mean.
#[test]
fn objective_trend_is_upward() {
    let (x, y, _) = sine(200, 0);
    let out = trainer::train(&x, &y, &sine_config(1000)).unwrap();
    let values: Vec<f64> = out.history.iter().map(|h| h.mean_log_z).collect();
    let averages: Vec<f64> = values.windows(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
    let tail = &values[900..];
    let tail_mean = tail.iter().sum::<f64>() / 100.0;
    let tail_sd = (tail.iter().map(|v| (v - tail_mean).powi(2)).sum::<f64>() / 99.0).sqrt();
    let tol = 2.0 * tail_sd / 10.0;
    let mut best = f64::NEG_INFINITY;
    let mut violations = 0;
    for &a in &averages {
        if a < best - tol {
            violations += 1;
        }
        best = best.max(a);
    }
    assert!(
        violations as f64 <= 0.05 * averages.len() as f64,
        "{violations} of {} averages fell more than {tol:.4} below the running best",
        averages.len()
    );
    assert!(averages.last().unwrap() > &(averages[0] + 0.1));
}

#[test]
fn untrained_single_layer_predicts_the_prior() {
    let (x, y, _) = sine(30, 4);
    let (model, state) = trainer::init_model(&x, &y, &Architecture::shallow(5), 0).unwrap();
    let pred = network::predict(&model, &state, &x).unwrap();
    let l = &model.layers[0];
    for (m, v) in pred.mean_std.iter().zip(&pred.var_std) {
        assert!(m.abs() < 1e-12);
        assert!((v - (l.noise() + l.kernel.sf2())).abs() < 1e-9);
    }
}

/// Train normally, then freeze hyperparameters and let SEP settle; the
/// result must be the exact FITC posterior for those hyperparameters.
fn shallow_recovery(n: usize, m: usize) -> (f64, f64) {
    let (x, y, _) = sine(n, 7);
    let config = TrainConfig {
        iterations: 500,
        minibatch_size: n.min(10),
        architecture: Architecture::shallow(m),
        ..TrainConfig::default()
    };
    let out = trainer::train(&x, &y, &config).unwrap();
    let xs = out.model.standardizer.transform_x(&x);
    let ys = out.model.standardizer.transform_y(&y);
    let frozen = TrainConfig {
        iterations: 50,
        minibatch_size: n,
        learning_rate: 0.0,
        ..config
    };
    let settled = trainer::train_from(out.model, out.state, &xs, &ys, &frozen).unwrap();
    let pred = network::predict(&settled.model, &settled.state, &x).unwrap();
    let (means, vars) = verify::fitc_predictive(&settled.model, &xs, &ys, &xs).unwrap();
    let rmse = (pred.mean_std.iter().zip(&means).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
    let rel = pred
        .var_std
        .iter()
        .zip(&vars)
        .map(|(a, b)| ((a - b) / b).abs())
        .fold(0.0, f64::max);
    (rmse, rel)
}

#[test]
fn shallow_training_recovers_fitc_posterior() {
    let (rmse, rel) = shallow_recovery(50, 10);
    assert!(rmse <= 1e-2, "rmse {rmse}");
    assert!(rel <= 0.05, "variance error {rel}");
}

#[test]
fn five_point_model_matches_fitc_at_training_inputs() {
    let (rmse, _) = shallow_recovery(5, 3);
    assert!(rmse <= 1e-2, "rmse {rmse}");
}

#[test]
fn state_size_does_not_grow_with_data() {
    let (x, y, _) = sine(100, 2);
    let (model, small) = trainer::init_model(&x, &y, &"2@8,y@8".parse().unwrap(), 0).unwrap();
    let large = InferenceState::new(&model, 100_000).unwrap();
    assert_eq!(small.param_count(), large.param_count());
}
