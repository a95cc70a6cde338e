use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_variance, EffectEstimate, Panel, PanelRow};
use crate::error::{Error, Result};
use crate::linalg::sample_sd;
use crate::simulator::Estimand;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelShape {
    #[default]
    Gaussian,
    /// Compact support on |u| ≤ 1.
    Epanechnikov,
}

impl KernelShape {
    fn eval(self, u: f64) -> f64 {
        match self {
            KernelShape::Gaussian => (-0.5 * u * u).exp(),
            KernelShape::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Smoother {
    #[default]
    NadarayaWatson,
    LocalLinear,
}

/// Conditioning set of μ_h.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelConditioning {
    #[default]
    AOnly,
    AX,
    /// A, X and the panel's history window.
    AXHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bandwidth {
    /// 1.06 σ̂ n^{-1/5} per dimension.
    #[default]
    RuleOfThumb,
    Fixed { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct KernelOptions {
    pub conditioning: KernelConditioning,
    pub smoother: Smoother,
    pub kernel: KernelShape,
    pub bandwidth: Bandwidth,
}

/// Fitted kernel regression of Y_{t+h} on the conditioning variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub h: usize,
    pub options: KernelOptions,
    pub bandwidth: Vec<f64>,
    /// Regressor rows z_i = (a, x, d) depending on the conditioning.
    z: Vec<Vec<f64>>,
    y: Vec<f64>,
    pub n: usize,
    /// Per-dimension (min, max) of the design.
    pub support: Vec<(f64, f64)>,
}

fn regressors(row: &PanelRow, c: KernelConditioning) -> Vec<f64> {
    let mut z = row.a.clone();
    if matches!(c, KernelConditioning::AX | KernelConditioning::AXHistory) {
        z.extend_from_slice(&row.x);
    }
    if c == KernelConditioning::AXHistory {
        z.extend_from_slice(&row.history);
    }
    z
}

pub fn kernel_mu(panel: &Panel, h: usize, options: &KernelOptions) -> Result<RegressionFit> {
    panel.check_h(h)?;
    if panel.is_empty() {
        return Err(Error::EmptyCell("empty panel".into()));
    }
    let z: Vec<Vec<f64>> = panel.rows.iter().map(|r| regressors(r, options.conditioning)).collect();
    let y = panel.y(h);
    let n = z.len();
    let d = z[0].len();
    let bandwidth = match &options.bandwidth {
        Bandwidth::Fixed { values } => {
            if values.len() != d {
                return Err(Error::dim("bandwidth", d, values.len()));
            }
            if values.iter().any(|b| !(*b > 0.0)) {
                return Err(Error::InvalidArgument("bandwidths must be positive".into()));
            }
            values.clone()
        }
        Bandwidth::RuleOfThumb => (0..d)
            .map(|j| {
                let col: Vec<f64> = z.iter().map(|r| r[j]).collect();
                let s = sample_sd(&col);
                let b = 1.06 * s * (n as f64).powf(-0.2);
                if b > 0.0 {
                    b
                } else {
                    1.0
                }
            })
            .collect(),
    };
    let support = (0..d)
        .map(|j| {
            z.iter()
                .map(|r| r[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect();
    Ok(RegressionFit {
        h,
        options: options.clone(),
        bandwidth,
        z,
        y,
        n,
        support,
    })
}

impl RegressionFit {
    fn weights(&self, point: &[f64]) -> Vec<f64> {
        let k = self.options.kernel;
        self.z
            .iter()
            .map(|zi| {
                zi.iter()
                    .zip(point)
                    .zip(&self.bandwidth)
                    .map(|((a, b), bw)| k.eval((a - b) / bw))
                    .product()
            })
            .collect()
    }

    /// μ̂ at a regressor point (a, x, d) laid out like the conditioning.
    pub fn predict_point(&self, point: &[f64]) -> Result<f64> {
        Ok(self.predict_with_variance(point)?.0)
    }

    /// μ̂ and an approximate sampling variance Σwᵢ²(yᵢ − μ̂)² / (Σwᵢ)², which
    /// treats rows as independent.
    pub fn predict_with_variance(&self, point: &[f64]) -> Result<(f64, f64)> {
        if point.len() != self.bandwidth.len() {
            return Err(Error::dim("evaluation point", self.bandwidth.len(), point.len()));
        }
        let w = self.weights(point);
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroKernelMass(point.to_vec()));
        }
        let fit = match self.options.smoother {
            Smoother::NadarayaWatson => w.iter().zip(&self.y).map(|(w, y)| w * y).sum::<f64>() / total,
            Smoother::LocalLinear => self.local_linear(point, &w, total)?,
        };
        let var = w
            .iter()
            .zip(&self.y)
            .map(|(w, y)| w * w * (y - fit) * (y - fit))
            .sum::<f64>()
            / (total * total);
        Ok((fit, var))
    }

    fn local_linear(&self, point: &[f64], w: &[f64], total: f64) -> Result<f64> {
        let d = point.len();
        let mut xtwx = DMatrix::zeros(d + 1, d + 1);
        let mut xtwy = DVector::zeros(d + 1);
        let mut row = vec![0.0; d + 1];
        for ((zi, wi), yi) in self.z.iter().zip(w).zip(&self.y) {
            if *wi == 0.0 {
                continue;
            }
            row[0] = 1.0;
            for j in 0..d {
                row[j + 1] = (zi[j] - point[j]) / self.bandwidth[j];
            }
            for p in 0..=d {
                xtwy[p] += wi * row[p] * yi;
                for q in 0..=d {
                    xtwx[(p, q)] += wi * row[p] * row[q];
                }
            }
        }
        xtwx /= total;
        xtwy /= total;
        match xtwx.clone().cholesky() {
            Some(ch) if crate::linalg::sym_condition(&xtwx) < crate::linalg::MAX_CONDITION => Ok(ch.solve(&xtwy)[0]),
            // locally degenerate design: fall back to the local constant
            _ => Ok(xtwy[0]),
        }
    }

    /// μ̂(a, ·) evaluated with the conditioning variables of `row`.
    pub fn predict(&self, a: &[f64], row: &PanelRow) -> Result<f64> {
        let mut r = row.clone();
        r.a = a.to_vec();
        self.predict_point(&regressors(&r, self.options.conditioning))
    }

    /// Plug-in ATE by iterated expectations over the empirical law of the
    /// conditioning variables in `panel`. For A-only conditioning the
    /// standard error uses the pointwise kernel variances; otherwise the
    /// averaged contrast series with a HAC.
    pub fn plug_in_ate(&self, panel: &Panel, a: &[f64], a_alt: &[f64]) -> Result<EffectEstimate> {
        let (point, var) = if self.options.conditioning == KernelConditioning::AOnly {
            let (m1, v1) = self.predict_with_variance(a)?;
            let (m0, v0) = self.predict_with_variance(a_alt)?;
            (m1 - m0, v1 + v0)
        } else {
            let diffs: Vec<f64> = panel
                .rows
                .par_iter()
                .map(|r| Ok(self.predict(a, r)? - self.predict(a_alt, r)?))
                .collect::<Result<_>>()?;
            let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let psi: Vec<f64> = diffs.iter().map(|d| d - m).collect();
            (m, mean_variance(panel, &psi, self.h, None))
        };
        Ok(EffectEstimate {
            estimand: Estimand::Ate,
            h: self.h,
            contrast: (a.to_vec(), a_alt.to_vec()),
            point,
            stderr: var.max(0.0).sqrt(),
            method: format!("kernel_{:?}", self.options.smoother).to_lowercase(),
            n_obs: self.n,
        })
    }
}
