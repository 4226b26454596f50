//! Initialization, Adam, and the training loop that interleaves SEP factor
//! updates with stochastic hyperparameter steps.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::layer::{GaussianSite, SparseGpLayer};
use crate::network::{DgpModel, Evaluator, ModelGrads, PointResult};
use crate::sep::{self, SepConfig, SiteEstimator, UpdateMode};
use crate::state::InferenceState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub minibatch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub architecture: Architecture,
    pub sep: SepConfig,
    /// Abort after this many consecutive minibatches in which every point failed.
    pub max_failed_minibatches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            minibatch_size: 50,
            iterations: 4000,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            architecture: Architecture::shallow(50),
            sep: SepConfig::default(),
            max_failed_minibatches: 50,
        }
    }
}

impl TrainConfig {
    /// `learning_rate = 0` is accepted and freezes the hyperparameters.
    pub fn validate(&self) -> Result<()> {
        if self.minibatch_size == 0 {
            return Err(Error::InvalidParameter("minibatch_size must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidParameter("Adam betas must be in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidParameter("adam_eps must be > 0".into()));
        }
        self.sep.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam ascent step. A non-finite gradient leaves
/// parameters and state untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return Err(Error::shape(format!(
            "adam step with {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first_moment[i] = b1 * state.first_moment[i] + (1.0 - b1) * g;
        state.second_moment[i] = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        let m_hat = state.first_moment[i] / c1;
        let v_hat = state.second_moment[i] / c2;
        params[i] += config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
    }
    Ok(())
}

/// Per-dimension median of pairwise absolute differences, over at most
/// 1000 rows.
pub fn median_distances(x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = x.nrows();
    let rows: Vec<usize> = if n > 1000 {
        rand::seq::index::sample(rng, n, 1000).into_vec()
    } else {
        (0..n).collect()
    };
    (0..x.ncols())
        .map(|d| {
            let mut dist = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
            for (a, &i) in rows.iter().enumerate() {
                for &j in &rows[..a] {
                    dist.push((x[(i, d)] - x[(j, d)]).abs());
                }
            }
            if dist.is_empty() {
                return 1.0;
            }
            let mid = dist.len() / 2;
            let (_, upper, _) = dist.select_nth_unstable_by(mid, f64::total_cmp);
            let upper = *upper;
            let median = if dist.len() % 2 == 1 {
                upper
            } else {
                let lower = dist[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                0.5 * (lower + upper)
            };
            if median > 0.0 {
                median
            } else {
                1.0
            }
        })
        .collect()
}

/// Lloyd's algorithm from `m` distinct data rows, fixed iteration count.
pub fn kmeans(x: &DMatrix<f64>, m: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if m > n {
        return Err(Error::InvalidParameter(format!(
            "{m} inducing points requested for {n} datapoints"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut picked: Vec<usize> = Vec::with_capacity(m);
    for &i in &order {
        if picked.len() == m {
            break;
        }
        if !picked.iter().any(|&j| x.row(i) == x.row(j)) {
            picked.push(i);
        }
    }
    // fewer distinct rows than m: fill with duplicates
    for &i in &order {
        if picked.len() == m {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    let mut centers = x.select_rows(&picked);
    let d = x.ncols();
    for _ in 0..iterations {
        let mut sums = DMatrix::<f64>::zeros(m, d);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..m {
                let dist = (x.row(i) - centers.row(c)).norm_squared();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            counts[best] += 1;
            let mut row = sums.row_mut(best);
            row += x.row(i);
        }
        for c in 0..m {
            if counts[c] > 0 {
                let mean = sums.row(c) / counts[c] as f64;
                centers.set_row(c, &mean);
            }
        }
    }
    Ok(centers)
}

/// Hidden-layer initial lengthscale: long relative to a unit-scale input.
const HIDDEN_LENGTHSCALE: f64 = 20.0;
const HIDDEN_NOISE: f64 = 0.01;
const OUTPUT_NOISE: f64 = 0.1;

/// Builds a model for standardized inputs `x`; `standardizer` is stored
/// with it. All factors start at zero.
pub fn init_model_standardized(
    x: &DMatrix<f64>,
    standardizer: Standardizer,
    arch: &Architecture,
    seed: u64,
) -> Result<(DgpModel, InferenceState)> {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = arch.layer_shapes(x.ncols());
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, &(din, dout, m)) in shapes.iter().enumerate() {
        let last = i + 1 == shapes.len();
        let noise = if last { OUTPUT_NOISE } else { HIDDEN_NOISE };
        let (z, ls) = if i == 0 {
            let ls = median_distances(x, &mut rng);
            (kmeans(x, m, 10, &mut rng)?, ls)
        } else {
            let z = DMatrix::from_fn(m, din, |_, _| rng.random_range(-1.0..=1.0));
            (z, vec![HIDDEN_LENGTHSCALE; din])
        };
        layers.push(SparseGpLayer::new(z, KernelParams::new(1.0, &ls), noise.ln(), dout)?);
    }
    let model = DgpModel::new(layers, standardizer)?;
    let state = InferenceState::new(&model, n)?;
    Ok((model, state))
}

/// Fits the standardizer on `(x, y)` and initializes a model.
pub fn init_model(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    arch: &Architecture,
    seed: u64,
) -> Result<(DgpModel, InferenceState)> {
    let standardizer = Standardizer::fit(x, y)?;
    let xs = standardizer.transform_x(x);
    init_model_standardized(&xs, standardizer, arch, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iter: usize,
    /// Mean log Z over the minibatch points that succeeded (NaN if none).
    pub mean_log_z: f64,
    pub skips: usize,
    pub jitter_events: usize,
}

/// Result of one minibatch.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub mean_log_z: f64,
    pub n_ok: usize,
    pub skips: usize,
    pub jitter_events: usize,
    /// `(N/n_ok)·Σ ∂log Z_n` at the cavity, in parameter order.
    pub data_grad: Vec<f64>,
    /// Gradient of `E_q[log p(u)]` through `K_zz`.
    pub prior_grad: Vec<f64>,
}

impl StepOutcome {
    pub fn gradient(&self) -> Vec<f64> {
        self.data_grad.iter().zip(&self.prior_grad).map(|(a, b)| a + b).collect()
    }
}

struct PointOutcome {
    result: PointResult,
    /// Site estimate per layer per output dim.
    sites: Vec<Vec<GaussianSite>>,
}

fn evaluate_point(
    ev: &Evaluator<'_>,
    estimators: &[Vec<SiteEstimator>],
    x: &[f64],
    y: f64,
) -> Result<PointOutcome> {
    let result = ev.point_grads(x, y)?;
    if !result.log_z.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let mut sites = Vec::with_capacity(estimators.len());
    for (l, ests) in estimators.iter().enumerate() {
        let trace = &result.traces[l];
        let adj = &result.grads.layers[l];
        let (g_mean, g_var) = &result.upstream[l];
        let c = trace.point.then(|| ev.caches()[l].kinv() * &trace.psi.psi1);
        let mut layer_sites = Vec::with_capacity(ests.len());
        for (d, est) in ests.iter().enumerate() {
            let site = match &c {
                Some(c) => est.estimate_rank_one(c, g_mean[d], g_var[d])?,
                None => est.estimate(&adj.d_mean[d], &adj.d_cov[d])?,
            };
            layer_sites.push(site);
        }
        sites.push(layer_sites);
    }
    Ok(PointOutcome { result, sites })
}

/// `½[K⁻¹(V + m mᵀ)K⁻¹ − K⁻¹]` summed over output dims, pushed into the
/// layer parameters.
fn prior_term(model: &DgpModel, state: &InferenceState) -> Result<Vec<f64>> {
    let post = state.posterior_moments(model)?;
    let ev = Evaluator::new(model, &post)?;
    let mut grads = ModelGrads::zeros(model);
    for ((cache, beliefs), adj) in ev.caches().iter().zip(&post).zip(&mut grads.layers) {
        let kinv = cache.kinv();
        let m = kinv.nrows();
        let mut g = DMatrix::zeros(m, m);
        for b in beliefs {
            let a = kinv * &b.mean;
            g += (kinv * &b.cov * kinv + &a * a.transpose() - kinv) * 0.5;
        }
        cache.add_kzz_cotangent(adj, &g);
    }
    Ok(grads.param_vector())
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// One SEP update over `batch` plus the hyperparameter gradient.
/// `x`, `y` are standardized. The state is updated in place; the model is not.
pub fn sep_step(
    model: &DgpModel,
    state: &mut InferenceState,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    batch: &[usize],
    config: &SepConfig,
) -> Result<StepOutcome> {
    let n_train = state.n_train;
    let mut data_grads = ModelGrads::zeros(model);
    let mut sum_log_z = 0.0;
    let mut n_ok = 0usize;
    let mut jitter_events = 0usize;

    match config.mode {
        UpdateMode::PerMinibatch => {
            let cav = match state.cavity_moments(model) {
                Ok(c) => c,
                Err(e) => {
                    log::debug!("cavity failed: {e}");
                    return Ok(skipped_step(model, batch.len()));
                }
            };
            let ev = Evaluator::new(model, &cav)?;
            jitter_events += ev.jitter_events();
            let estimators = cav
                .iter()
                .map(|layer| layer.iter().map(SiteEstimator::new).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let eval = |&i: &usize| evaluate_point(&ev, &estimators, &row(x, i), y[i]);
            let outcomes: Vec<Result<PointOutcome>> = if config.parallel_within_minibatch {
                batch.par_iter().map(eval).collect()
            } else {
                batch.iter().map(eval).collect()
            };
            let mut site_sums: Option<Vec<Vec<GaussianSite>>> = None;
            for out in outcomes {
                match out {
                    Ok(p) => {
                        n_ok += 1;
                        sum_log_z += p.result.log_z;
                        data_grads.accumulate(&p.result.grads, 1.0);
                        match &mut site_sums {
                            None => site_sums = Some(p.sites),
                            Some(sums) => {
                                for (sl, pl) in sums.iter_mut().zip(&p.sites) {
                                    for (s, t) in sl.iter_mut().zip(pl) {
                                        *s = s.plus(t, 1.0);
                                    }
                                }
                            }
                        }
                    }
                    Err(e) if config.skip_on_failure => log::trace!("skipped point: {e}"),
                    Err(e) => return Err(e),
                }
            }
            if n_ok == 0 {
                return Ok(skipped_step(model, batch.len()));
            }
            let scale = n_train as f64 / n_ok as f64;
            let mut scaled = ModelGrads::zeros(model);
            scaled.accumulate(&data_grads, scale);
            ev.finish(&mut scaled);
            data_grads = scaled;

            let eta = config.minibatch_step(n_train, n_ok);
            let sums = site_sums.expect("at least one point succeeded");
            for (l, layer_sums) in sums.iter().enumerate() {
                for (d, sum) in layer_sums.iter().enumerate() {
                    let mean_site = sum.scaled(1.0 / n_ok as f64);
                    let g = sep::update_factor(&state.layers[l].dims[d].g, &mean_site, eta);
                    if let Err(e) = state.set_factor(l, d, g) {
                        log::debug!("factor update rejected in layer {l} dim {d}: {e}");
                    }
                }
            }
        }
        UpdateMode::PerDatapoint => {
            let eta = config.step_size(n_train);
            let mut finished = ModelGrads::zeros(model);
            for &i in batch {
                let cav = match state.cavity_moments(model) {
                    Ok(c) => c,
                    Err(_) => continue,
                };
                let ev = Evaluator::new(model, &cav)?;
                jitter_events += ev.jitter_events();
                let estimators = cav
                    .iter()
                    .map(|layer| layer.iter().map(SiteEstimator::new).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                let p = match evaluate_point(&ev, &estimators, &row(x, i), y[i]) {
                    Ok(p) => p,
                    Err(e) if config.skip_on_failure => {
                        log::trace!("skipped point: {e}");
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                n_ok += 1;
                sum_log_z += p.result.log_z;
                let mut g = p.result.grads;
                ev.finish(&mut g);
                finished.accumulate(&g, 1.0);
                for (l, layer_sites) in p.sites.iter().enumerate() {
                    for (d, site) in layer_sites.iter().enumerate() {
                        let g = sep::update_factor(&state.layers[l].dims[d].g, site, eta);
                        if let Err(e) = state.set_factor(l, d, g) {
                            log::debug!("factor update rejected in layer {l} dim {d}: {e}");
                        }
                    }
                }
            }
            if n_ok == 0 {
                return Ok(skipped_step(model, batch.len()));
            }
            data_grads = ModelGrads::zeros(model);
            data_grads.accumulate(&finished, n_train as f64 / n_ok as f64);
        }
    }

    Ok(StepOutcome {
        mean_log_z: sum_log_z / n_ok as f64,
        n_ok,
        skips: batch.len() - n_ok,
        jitter_events,
        data_grad: data_grads.param_vector(),
        prior_grad: prior_term(model, state)?,
    })
}

fn skipped_step(model: &DgpModel, batch: usize) -> StepOutcome {
    let n = model.n_params();
    StepOutcome {
        mean_log_z: f64::NAN,
        n_ok: 0,
        skips: batch,
        jitter_events: 0,
        data_grad: vec![0.0; n],
        prior_grad: vec![0.0; n],
    }
}

/// Seeded minibatches, without replacement within an epoch.
pub struct MinibatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl MinibatchSampler {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        MinibatchSampler {
            rng,
            order,
            pos: 0,
            size: size.min(n),
        }
    }

    /// The final batch of an epoch may be short.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DgpModel,
    pub state: InferenceState,
    pub history: Vec<HistoryRow>,
}

/// Continues training an initialized model on standardized data.
pub fn train_from(
    mut model: DgpModel,
    mut state: InferenceState,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if x.nrows() != y.len() || x.nrows() != state.n_train {
        return Err(Error::shape(format!(
            "{} inputs, {} targets, state built for {}",
            x.nrows(),
            y.len(),
            state.n_train
        )));
    }
    let mut sampler = MinibatchSampler::new(x.nrows(), config.minibatch_size, config.seed);
    let mut adam = AdamState::new(model.n_params());
    let mut history = Vec::with_capacity(config.iterations);
    let mut failed_run = 0usize;
    for iter in 0..config.iterations {
        let batch = sampler.next_batch();
        let step = sep_step(&model, &mut state, x, y, &batch, &config.sep)?;
        history.push(HistoryRow {
            iter,
            mean_log_z: step.mean_log_z,
            skips: step.skips,
            jitter_events: step.jitter_events,
        });
        if step.n_ok == 0 {
            failed_run += 1;
            if failed_run >= config.max_failed_minibatches {
                return Err(Error::TrainingAborted(format!(
                    "{failed_run} consecutive minibatches failed at iteration {iter}"
                )));
            }
            continue;
        }
        failed_run = 0;
        if config.learning_rate > 0.0 {
            let before = model.params();
            let mut params = before.clone();
            match adam_step(&mut params, &step.gradient(), &mut adam, config) {
                Ok(()) => {
                    model.set_params(&params)?;
                    if let Err(e) = state.refresh(&model) {
                        log::warn!("iteration {iter}: reverting hyperparameter step ({e})");
                        model.set_params(&before)?;
                        state.refresh(&model)?;
                    }
                }
                Err(e) => log::warn!("iteration {iter}: skipping hyperparameter step ({e})"),
            }
        }
        if (iter + 1) % 500 == 0 {
            log::info!("iteration {}: mean log Z {:.4}", iter + 1, step.mean_log_z);
        }
    }
    Ok(TrainOutcome { model, state, history })
}

/// Standardizes raw data, initializes and trains.
pub fn train(x: &DMatrix<f64>, y: &DVector<f64>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (model, state) = init_model(x, y, &config.architecture, config.seed)?;
    let xs = model.standardizer.transform_x(x);
    let ys = model.standardizer.transform_y(y);
    train_from(model, state, &xs, &ys, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::grad_log_z;

    fn sine_data(n: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::<f64>::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)].sin() + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal));
        (x, y)
    }

    #[test]
    fn adam_zero_gradient() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[3.0, -0.02], &mut s, &cfg).unwrap();
        assert!((p[0] - 0.01).abs() < 1e-9);
        assert!((p[1] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn adam_two_steps_by_hand() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.5];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &cfg).unwrap();
        adam_step(&mut p, &[-2.0], &mut s, &cfg).unwrap();
        // m = 0.9·0.1 − 0.2 = −0.11, v = 0.999·0.001 + 0.004 = 0.004999
        let m_hat = -0.11 / (1.0 - 0.81);
        let v_hat: f64 = 0.004999 / (1.0 - 0.998001);
        let first = 0.01 * 1.0 / (1.0 + 1e-8);
        let expected = 0.5 + first + 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12, "{} vs {expected}", p[0]);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        assert!(matches!(adam_step(&mut p, &[f64::NAN], &mut s, &cfg), Err(Error::NonFiniteGradient)));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn median_of_three_points() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(median_distances(&x, &mut rng), vec![1.0]);
        let constant = DMatrix::from_element(4, 1, 3.0);
        assert_eq!(median_distances(&constant, &mut rng), vec![1.0]);
    }

    #[test]
    fn kmeans_with_m_equal_n_returns_the_data() {
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 2.0, 3.0, -1.0, 0.5, 4.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = kmeans(&x, 4, 10, &mut rng).unwrap();
        let mut zr: Vec<Vec<f64>> = (0..4).map(|i| z.row(i).iter().copied().collect()).collect();
        let mut xr: Vec<Vec<f64>> = (0..4).map(|i| x.row(i).iter().copied().collect()).collect();
        zr.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xr.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(zr, xr);
        assert!(kmeans(&x, 5, 10, &mut rng).is_err());
    }

    #[test]
    fn hidden_layer_inducing_inputs_in_unit_box() {
        let (x, y) = sine_data(60, 1);
        let arch: Architecture = "3@10,y@8".parse().unwrap();
        let (model, state) = init_model(&x, &y, &arch, 5).unwrap();
        assert!(model.layers[1].z.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(model.layers[1].kernel.log_lengthscales, vec![20f64.ln(); 3]);
        assert_eq!(state.layers.len(), 2);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = MinibatchSampler::new(10, 4, 0);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn data_gradient_is_scaled_sum_of_point_gradients() {
        let (x, y) = sine_data(40, 2);
        let arch: Architecture = "2@5,y@6".parse().unwrap();
        let (model, mut state) = init_model(&x, &y, &arch, 1).unwrap();
        let xs = model.standardizer.transform_x(&x);
        let ys = model.standardizer.transform_y(&y);
        // move away from the prior first
        for b in [[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]] {
            sep_step(&model, &mut state, &xs, &ys, &b, &SepConfig::default()).unwrap();
        }
        let batch = [10, 11, 12, 13, 14, 15, 16];
        let cav = state.cavity_moments(&model).unwrap();
        let mut expected = vec![0.0; model.n_params()];
        for &i in &batch {
            let (_, g) = grad_log_z(&model, &cav, &row(&xs, i), ys[i]).unwrap();
            for (e, v) in expected.iter_mut().zip(g.param_vector()) {
                *e += v * 40.0 / batch.len() as f64;
            }
        }
        let step = sep_step(&model, &mut state, &xs, &ys, &batch, &SepConfig::default()).unwrap();
        assert_eq!(step.n_ok, batch.len());
        for (a, b) in step.data_grad.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (x, y) = sine_data(50, 3);
        let config = TrainConfig {
            iterations: 20,
            minibatch_size: 10,
            learning_rate: 0.0,
            architecture: "y@8".parse().unwrap(),
            ..Default::default()
        };
        let (init, init_state) = init_model(&x, &y, &config.architecture, config.seed).unwrap();
        let out = train(&x, &y, &config).unwrap();
        assert_eq!(out.model.params(), init.params());
        assert_ne!(out.state.factors(), init_state.factors());
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = sine_data(60, 4);
        let config = TrainConfig {
            iterations: 30,
            minibatch_size: 16,
            architecture: "1@6,y@6".parse().unwrap(),
            ..Default::default()
        };
        let a = train(&x, &y, &config).unwrap();
        let b = train(&x, &y, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.state, b.state);
        let bits = |h: &[HistoryRow]| h.iter().map(|r| r.mean_log_z.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.history), bits(&b.history));
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let (x, y) = sine_data(60, 5);
        let mut config = TrainConfig {
            iterations: 10,
            minibatch_size: 20,
            architecture: "2@5,y@5".parse().unwrap(),
            ..Default::default()
        };
        let a = train(&x, &y, &config).unwrap();
        config.sep.parallel_within_minibatch = true;
        let b = train(&x, &y, &config).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn per_datapoint_mode_runs() {
        let (x, y) = sine_data(40, 6);
        let config = TrainConfig {
            iterations: 10,
            minibatch_size: 8,
            architecture: "y@6".parse().unwrap(),
            sep: SepConfig {
                mode: UpdateMode::PerDatapoint,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train(&x, &y, &config).unwrap();
        assert!(out.history.iter().all(|h| h.skips == 0));
    }
}
