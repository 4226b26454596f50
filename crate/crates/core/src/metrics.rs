//! Test-set metrics on predictive Gaussians.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::log_normal;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rmse: f64,
    /// Mean predictive log density (higher is better).
    pub mll: f64,
    pub per_point_log_densities: Vec<f64>,
    pub n_test: usize,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{a} predictions for {b} targets")));
    }
    if a == 0 {
        return Err(Error::InvalidParameter("no test points".into()));
    }
    Ok(())
}

pub fn rmse(means: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(means.len(), targets.len())?;
    let sse: f64 = means.iter().zip(targets).map(|(m, y)| (m - y) * (m - y)).sum();
    Ok((sse / means.len() as f64).sqrt())
}

pub fn log_densities(means: &[f64], vars: &[f64], targets: &[f64]) -> Result<Vec<f64>> {
    check_lengths(means.len(), targets.len())?;
    check_lengths(vars.len(), targets.len())?;
    if let Some(v) = vars.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidParameter(format!("predictive variance {v} is not positive")));
    }
    Ok(means
        .iter()
        .zip(vars)
        .zip(targets)
        .map(|((m, v), y)| log_normal(*y, *m, *v))
        .collect())
}

pub fn mll(means: &[f64], vars: &[f64], targets: &[f64]) -> Result<f64> {
    let lp = log_densities(means, vars, targets)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

impl EvalReport {
    pub fn new(means: &[f64], vars: &[f64], targets: &[f64]) -> Result<Self> {
        let per_point_log_densities = log_densities(means, vars, targets)?;
        let n = per_point_log_densities.len();
        Ok(EvalReport {
            rmse: rmse(means, targets)?,
            mll: per_point_log_densities.iter().sum::<f64>() / n as f64,
            per_point_log_densities,
            n_test: n,
        })
    }
}
