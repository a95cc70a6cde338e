use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{mean_variance, EffectEstimate, Panel};
use crate::error::{Error, Result};
use crate::linalg::{bartlett_lrv, cluster_meat, default_hac_lag, least_squares, rowmajor, spd_inverse};
use crate::simulator::Estimand;

/// Difference of outcome means between the rows with A_t = a and A_t = a′.
/// The standard error comes from the two-group influence series with a
/// Bartlett HAC (single trajectory) or replication clusters (pooled).
pub fn diff_in_means(panel: &Panel, h: usize, a: &[f64], a_alt: &[f64]) -> Result<EffectEstimate> {
    panel.check_h(h)?;
    let n = panel.len();
    let (mut n1, mut n0, mut s1, mut s0) = (0usize, 0usize, 0.0, 0.0);
    for r in &panel.rows {
        if r.a == a {
            n1 += 1;
            s1 += r.leads[h];
        } else if r.a == a_alt {
            n0 += 1;
            s0 += r.leads[h];
        }
    }
    if n1 == 0 {
        return Err(Error::EmptyCell(format!("no rows with assignment {a:?}")));
    }
    if n0 == 0 {
        return Err(Error::EmptyCell(format!("no rows with assignment {a_alt:?}")));
    }
    let (m1, m0) = (s1 / n1 as f64, s0 / n0 as f64);
    let psi: Vec<f64> = panel
        .rows
        .iter()
        .map(|r| {
            if r.a == a {
                n as f64 / n1 as f64 * (r.leads[h] - m1)
            } else if r.a == a_alt {
                -(n as f64) / n0 as f64 * (r.leads[h] - m0)
            } else {
                0.0
            }
        })
        .collect();
    let var = mean_variance(panel, &psi, h, None);
    Ok(EffectEstimate {
        estimand: Estimand::Ate,
        h,
        contrast: (a.to_vec(), a_alt.to_vec()),
        point: m1 - m0,
        stderr: var.max(0.0).sqrt(),
        method: "diff_in_means".into(),
        n_obs: n1 + n0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Residualize {
    #[default]
    Joint,
    Fwl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LpOptions {
    /// Include X_t as controls.
    pub features: bool,
    /// Include the panel's history window D_{t-m:t-1} as controls.
    pub history: bool,
    pub residualize: Residualize,
    /// Bartlett truncation lag; default h + ceil(n^{1/3}).
    pub hac_lag: Option<usize>,
    /// Subset of assignment coordinates used as regressors (default all).
    pub assignment_cols: Option<Vec<usize>>,
    /// Per-row offset B_{t+h} subtracted from the outcome.
    pub offset: Option<Vec<f64>>,
}

/// Local projection of Y_{t+h} on (1, A_t, controls).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionFit {
    pub h: usize,
    pub kappa: f64,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub history_coef: Vec<f64>,
    /// Covariance of beta.
    #[serde(with = "rowmajor")]
    pub cov: DMatrix<f64>,
    pub stderr: Vec<f64>,
    pub cov_method: String,
    pub residualize: Residualize,
    pub n_obs: usize,
}

fn design(panel: &Panel, opts: &LpOptions) -> Result<(DMatrix<f64>, DMatrix<f64>, usize, usize)> {
    let n = panel.len();
    let da = panel.dims.1;
    let cols: Vec<usize> = opts.assignment_cols.clone().unwrap_or_else(|| (0..da).collect());
    if let Some(c) = cols.iter().find(|c| **c >= da) {
        return Err(Error::dim("assignment column", da, *c));
    }
    let dx = if opts.features { panel.dims.0 } else { 0 };
    let dh = if opts.history { panel.rows.first().map_or(0, |r| r.history.len()) } else { 0 };
    let mut a = DMatrix::zeros(n, cols.len());
    let mut c = DMatrix::zeros(n, 1 + dx + dh);
    for (i, r) in panel.rows.iter().enumerate() {
        for (j, k) in cols.iter().enumerate() {
            a[(i, j)] = r.a[*k];
        }
        c[(i, 0)] = 1.0;
        for j in 0..dx {
            c[(i, 1 + j)] = r.x[j];
        }
        for j in 0..dh {
            c[(i, 1 + dx + j)] = r.history[j];
        }
    }
    Ok((a, c, dx, dh))
}

pub fn lp_fit(panel: &Panel, h: usize, opts: &LpOptions) -> Result<ProjectionFit> {
    panel.check_h(h)?;
    let n = panel.len();
    let (a, c, dx, dh) = design(panel, opts)?;
    let ka = a.ncols();
    if n <= ka + c.ncols() {
        return Err(Error::InvalidArgument(format!("{n} rows are too few for {} regressors", ka + c.ncols())));
    }
    let mut y = DMatrix::from_iterator(n, 1, panel.rows.iter().map(|r| r.leads[h]));
    if let Some(off) = &opts.offset {
        if off.len() != n {
            return Err(Error::dim("offset", n, off.len()));
        }
        for i in 0..n {
            y[(i, 0)] -= off[i];
        }
    }

    // A residualised on the controls is needed for the covariance either way
    let aux = least_squares(&c, &a)?;
    let a_perp = aux.resid.clone();
    let aa = a_perp.transpose() * &a_perp;
    let aa_inv = spd_inverse(&(&aa / n as f64), "residualised assignment variance")? / n as f64;

    let (beta, rest) = match opts.residualize {
        Residualize::Joint => {
            let mut z = DMatrix::zeros(n, 1 + ka + dx + dh);
            z.column_mut(0).copy_from(&c.column(0));
            z.view_mut((0, 1), (n, ka)).copy_from(&a);
            z.view_mut((0, 1 + ka), (n, dx + dh)).copy_from(&c.columns(1, dx + dh));
            let fit = least_squares(&z, &y)?;
            let coef = fit.coef.column(0);
            let beta = DVector::from_iterator(ka, (0..ka).map(|j| coef[1 + j]));
            let mut rest = vec![coef[0]];
            rest.extend((0..dx + dh).map(|j| coef[1 + ka + j]));
            (beta, rest)
        }
        Residualize::Fwl => {
            let beta = least_squares(&a_perp, &y)?.coef.column(0).into_owned();
            let y_net = &y - &a * DMatrix::from_column_slice(ka, 1, beta.as_slice());
            let fit = least_squares(&c, &y_net)?;
            (beta, fit.coef.column(0).iter().cloned().collect())
        }
    };
    let resid = &y - &a * &beta - &c * DVector::from_vec(rest.clone());
    let mut scores = a_perp.clone();
    for i in 0..n {
        for j in 0..ka {
            scores[(i, j)] *= resid[(i, 0)];
        }
    }
    let (meat, method) = if panel.n_replications() > 1 {
        let clusters: Vec<usize> = panel.rows.iter().map(|r| r.replication as usize).collect();
        (cluster_meat(&scores, &clusters), format!("cluster({})", panel.n_replications()))
    } else {
        let lag = opts.hac_lag.unwrap_or_else(|| default_hac_lag(h, n));
        (bartlett_lrv(&scores, lag) * n as f64, format!("hac_bartlett({lag})"))
    };
    let cov = &aa_inv * meat * &aa_inv;
    let stderr = (0..ka).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    Ok(ProjectionFit {
        h,
        kappa: rest[0],
        beta: beta.iter().cloned().collect(),
        delta: rest[1..1 + dx].to_vec(),
        history_coef: rest[1 + dx..].to_vec(),
        cov,
        stderr,
        cov_method: method,
        residualize: opts.residualize,
        n_obs: n,
    })
}

/// Within-cell projection of Y_{t+h} on (1, X_t) among rows with A_t = atom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClpFit {
    pub h: usize,
    pub atom: Vec<f64>,
    pub kappa: f64,
    pub beta: Vec<f64>,
    pub y_mean: f64,
    pub x_mean: Vec<f64>,
    pub n: usize,
}

impl ClpFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.kappa + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

pub fn clp_fit(panel: &Panel, h: usize, atom: &[f64]) -> Result<ClpFit> {
    panel.check_h(h)?;
    let rows: Vec<_> = panel.rows.iter().filter(|r| r.a == atom).collect();
    if rows.is_empty() {
        return Err(Error::EmptyCell(format!("no rows with assignment {atom:?}")));
    }
    let dx = panel.dims.0;
    let n = rows.len();
    let mut z = DMatrix::zeros(n, 1 + dx);
    let y = DMatrix::from_iterator(n, 1, rows.iter().map(|r| r.leads[h]));
    for (i, r) in rows.iter().enumerate() {
        z[(i, 0)] = 1.0;
        for j in 0..dx {
            z[(i, 1 + j)] = r.x[j];
        }
    }
    if n <= dx {
        return Err(Error::Singular("within-cell feature variance".into()));
    }
    let fit = least_squares(&z, &y).map_err(|e| match e {
        Error::Singular(_) => Error::Singular("within-cell feature variance".into()),
        other => other,
    })?;
    let y_mean = y.mean();
    let x_mean = (0..dx).map(|j| z.column(1 + j).mean()).collect();
    Ok(ClpFit {
        h,
        atom: atom.to_vec(),
        kappa: fit.coef[(0, 0)],
        beta: (0..dx).map(|j| fit.coef[(1 + j, 0)]).collect(),
        y_mean,
        x_mean,
        n,
    })
}

/// Both sides of the CLP contrast decomposition at `x`:
/// `(κ¹−κ⁰) + (β¹−β⁰)x` and
/// `ȳ¹ − ȳ⁰ + β¹(x − x̄¹) − β⁰(x − x̄⁰)`.
pub fn clp_decomposition(fit1: &ClpFit, fit0: &ClpFit, x: &[f64]) -> (f64, f64) {
    let lhs = fit1.predict(x) - fit0.predict(x);
    let dot = |b: &[f64], m: &[f64]| b.iter().zip(x.iter().zip(m)).map(|(b, (x, m))| b * (x - m)).sum::<f64>();
    let rhs = fit1.y_mean - fit0.y_mean + dot(&fit1.beta, &fit1.x_mean) - dot(&fit0.beta, &fit0.x_mean);
    (lhs, rhs)
}
