use serde::{Deserialize, Serialize};

use super::{lp_fit, LpOptions, Panel, PanelOptions};
use crate::error::{Error, Result};
use crate::simulator::simulate_trajectory;
use crate::system::{CrossDependence, Distribution, SemModel, SystemSpec};

/// `B Var(A*) / (B² Var(A*) + Var(V̄))`: the projection coefficient on the
/// proxy relative to the coefficient on the true assignment.
pub fn attenuation_factor(b: f64, var_true: f64, var_noise: f64) -> Result<f64> {
    let denom = b * b * var_true + var_noise;
    if !(denom > 0.0) {
        return Err(Error::InvalidArgument("proxy has zero variance".into()));
    }
    Ok(b * var_true / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttenuationReport {
    pub h: usize,
    pub factor: f64,
    /// True projection coefficient on A*_t at horizon h.
    pub beta_true: f64,
    pub beta_proxy: f64,
    pub ratio: f64,
    /// Standard error of the ratio (the true coefficient is known).
    pub stderr: f64,
    pub n_obs: usize,
}

/// Simulates a proxy-assignment system and compares the projection
/// coefficient on the proxy with the theoretical attenuation factor.
pub fn attenuation_check(spec: &SystemSpec, h: usize, seed: u64) -> Result<AttenuationReport> {
    let p = match &spec.sem {
        SemModel::Proxy(p) => p.clone(),
        _ => return Err(Error::InvalidArgument("attenuation check needs a proxy-assignment system".into())),
    };
    let (var_true, var_noise) = match (&spec.noise.v, &spec.noise.cross) {
        (Distribution::Gaussian { covariance, .. }, CrossDependence::FullyIndependent) if covariance.nrows() == 2 => {
            if covariance[(0, 1)] != 0.0 {
                return Err(Error::InvalidArgument("proxy noise must be independent of the true assignment".into()));
            }
            (covariance[(0, 0)], covariance[(1, 1)])
        }
        _ => return Err(Error::InvalidArgument("proxy system needs independent Gaussian assignment noise".into())),
    };
    let factor = attenuation_factor(p.loading, var_true, var_noise)?;
    let beta_true = p.rho.powi(h as i32) * p.beta;
    if beta_true == 0.0 {
        return Err(Error::InvalidArgument("true coefficient is zero".into()));
    }
    let traj = simulate_trajectory(spec, seed, 0)?;
    let panel = Panel::from_trajectory(
        &traj,
        PanelOptions {
            max_h: h,
            history_lags: 0,
            outcome: 0,
        },
    )?;
    let fit = lp_fit(
        &panel,
        h,
        &LpOptions {
            assignment_cols: Some(vec![1]),
            ..Default::default()
        },
    )?;
    Ok(AttenuationReport {
        h,
        factor,
        beta_true,
        beta_proxy: fit.beta[0],
        ratio: fit.beta[0] / beta_true,
        stderr: fit.stderr[0] / beta_true.abs(),
        n_obs: fit.n_obs,
    })
}
