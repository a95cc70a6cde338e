//! Estimators of dynamic causal effects from observed trajectories.

mod aipw;
mod attenuation;
mod iv;
mod kernel;
mod panel;
mod projection;

pub use aipw::{aipw_ate, fit_cell_linear, AipwEstimate, OutcomeModel, PropensityKind, PropensityModel};
pub use attenuation::{attenuation_check, attenuation_factor, AttenuationReport};
pub use iv::{iv_wald, Coarsening, IvEstimate, DEFAULT_RELEVANCE_FLOOR};
pub use kernel::{kernel_mu, Bandwidth, KernelConditioning, KernelOptions, KernelShape, RegressionFit, Smoother};
pub use panel::{Panel, PanelOptions, PanelRow};
pub use projection::{clp_decomposition, clp_fit, diff_in_means, lp_fit, ClpFit, LpOptions, ProjectionFit, Residualize};

use serde::{Deserialize, Serialize};

use crate::linalg::{bartlett_lrv_scalar, default_hac_lag};
use crate::simulator::Estimand;

/// A point estimate of a causal summary with its standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimand: Estimand,
    pub h: usize,
    pub contrast: (Vec<f64>, Vec<f64>),
    pub point: f64,
    pub stderr: f64,
    pub method: String,
    pub n_obs: usize,
}

/// Variance of a sample mean whose influence series is `psi` (mean zero),
/// using replication clusters when the panel pools replications and a
/// Bartlett HAC with lag `lag` otherwise.
pub(crate) fn mean_variance(panel: &Panel, psi: &[f64], h: usize, lag: Option<usize>) -> f64 {
    let n = psi.len() as f64;
    if panel.n_replications() > 1 {
        use std::collections::BTreeMap;
        let mut sums: BTreeMap<u64, f64> = BTreeMap::new();
        for (row, v) in panel.rows.iter().zip(psi) {
            *sums.entry(row.replication).or_default() += v;
        }
        let g = sums.len() as f64;
        let s: f64 = sums.values().map(|v| v * v).sum();
        s * g / (g - 1.0) / (n * n)
    } else {
        let lag = lag.unwrap_or_else(|| default_hac_lag(h, psi.len()));
        bartlett_lrv_scalar(psi, lag) / n
    }
}
