use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{mean_variance, EffectEstimate, Panel, PanelRow, RegressionFit};
use crate::error::{Error, Result};
use crate::linalg::{logistic_irls, spd_inverse};
use crate::simulator::Estimand;
use crate::system::{assignment_law, SystemSpec};

type PropensityFn = dyn Fn(&PanelRow) -> Vec<f64> + Send + Sync;
type OutcomeFn = dyn Fn(&[f64], &PanelRow) -> f64 + Send + Sync;

/// Source of the propensity λ_a(X_t, D_{1:t-1}) over a list of atoms.
#[derive(Clone)]
pub enum PropensityKind {
    /// Exact conditional law from the generating system; the panel history
    /// window must cover the system order.
    KnownFromSpec(Arc<SystemSpec>),
    /// Fixed probabilities (also a deliberately misspecified model).
    Constant(Vec<f64>),
    /// Marginal atom frequencies, see [`PropensityModel::empirical`].
    EmpiricalFrequency(Vec<f64>),
    /// Binary logistic on (1, X_t, history); see [`PropensityModel::logistic`].
    LogisticOnFeatures { coef: Vec<f64>, history: bool },
    Custom(Arc<PropensityFn>),
}

impl std::fmt::Debug for PropensityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PropensityKind::KnownFromSpec(_) => write!(f, "known_from_spec"),
            PropensityKind::Constant(p) => write!(f, "constant({p:?})"),
            PropensityKind::EmpiricalFrequency(p) => write!(f, "empirical_frequency({p:?})"),
            PropensityKind::LogisticOnFeatures { coef, .. } => write!(f, "logistic({coef:?})"),
            PropensityKind::Custom(_) => write!(f, "custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub kind: PropensityKind,
    pub atoms: Vec<Vec<f64>>,
    /// Probabilities are clipped to [clip, 1 − clip].
    pub clip: f64,
}

pub const DEFAULT_CLIP: f64 = 0.01;

fn logistic_design(row: &PanelRow, history: bool) -> Vec<f64> {
    let mut z = vec![1.0];
    z.extend_from_slice(&row.x);
    if history {
        z.extend_from_slice(&row.history);
    }
    z
}

impl PropensityModel {
    pub fn new(kind: PropensityKind, atoms: Vec<Vec<f64>>) -> Self {
        PropensityModel {
            kind,
            atoms,
            clip: DEFAULT_CLIP,
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = clip;
        self
    }

    pub fn empirical(panel: &Panel, atoms: Vec<Vec<f64>>) -> Result<Self> {
        let n = panel.len() as f64;
        let probs: Vec<f64> = atoms
            .iter()
            .map(|a| panel.rows.iter().filter(|r| &r.a == a).count() as f64 / n)
            .collect();
        Ok(Self::new(PropensityKind::EmpiricalFrequency(probs), atoms))
    }

    /// Binary logistic fit of 1{A_t = atoms[1]} on (1, X_t[, history]).
    pub fn logistic(panel: &Panel, atoms: Vec<Vec<f64>>, history: bool) -> Result<Self> {
        if atoms.len() != 2 {
            return Err(Error::InvalidArgument("logistic propensity needs exactly two atoms".into()));
        }
        let k = logistic_design(&panel.rows[0], history).len();
        let x = DMatrix::from_row_iterator(
            panel.len(),
            k,
            panel.rows.iter().flat_map(|r| logistic_design(r, history)),
        );
        let y: Vec<f64> = panel.rows.iter().map(|r| f64::from(r.a == atoms[1])).collect();
        let (coef, _) = logistic_irls(&x, &y)?;
        Ok(Self::new(
            PropensityKind::LogisticOnFeatures {
                coef: coef.iter().cloned().collect(),
                history,
            },
            atoms,
        ))
    }

    /// Unclipped probabilities over `atoms` for a row.
    pub fn raw(&self, panel: &Panel, row: &PanelRow) -> Result<Vec<f64>> {
        match &self.kind {
            PropensityKind::KnownFromSpec(spec) => {
                let law = assignment_law(spec, &panel.history_records(row), &row.x)?;
                let atoms = spec.spaces.atoms().unwrap_or_default();
                self.atoms
                    .iter()
                    .map(|a| {
                        atoms
                            .iter()
                            .position(|b| b == a)
                            .map(|i| law[i])
                            .ok_or_else(|| Error::UnobservedAtom(format!("{a:?}")))
                    })
                    .collect()
            }
            PropensityKind::Constant(p) | PropensityKind::EmpiricalFrequency(p) => Ok(p.clone()),
            PropensityKind::LogisticOnFeatures { coef, history } => {
                let z = logistic_design(row, *history);
                let eta: f64 = z.iter().zip(coef).map(|(a, b)| a * b).sum();
                let p1 = 1.0 / (1.0 + (-eta).exp());
                Ok(vec![1.0 - p1, p1])
            }
            PropensityKind::Custom(f) => Ok(f(row)),
        }
    }

    /// Clipped probability of atom index `k`; errors when the raw value is
    /// zero and no clipping is configured.
    pub fn prob(&self, panel: &Panel, row: &PanelRow, k: usize) -> Result<(f64, bool)> {
        let p = self.raw(panel, row)?[k];
        if self.clip <= 0.0 && p <= 0.0 {
            return Err(Error::Positivity(p));
        }
        let c = p.clamp(self.clip, 1.0 - self.clip);
        Ok((c, c != p))
    }
}

/// Outcome regression μ(a, x, d) = E[Y_{t+h} | A_t = a, X_t, D].
#[derive(Clone)]
pub enum OutcomeModel {
    Kernel(RegressionFit),
    /// Per-atom linear model in (1, X_t[, history]).
    CellLinear {
        atoms: Vec<Vec<f64>>,
        coefs: Vec<Vec<f64>>,
        history: bool,
    },
    Function(Arc<OutcomeFn>),
    Zero,
}

impl std::fmt::Debug for OutcomeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OutcomeModel::Kernel(k) => write!(f, "kernel({:?})", k.options),
            OutcomeModel::CellLinear { coefs, .. } => write!(f, "cell_linear({coefs:?})"),
            OutcomeModel::Function(_) => write!(f, "function"),
            OutcomeModel::Zero => write!(f, "zero"),
        }
    }
}

impl OutcomeModel {
    pub fn predict(&self, a: &[f64], row: &PanelRow) -> Result<f64> {
        match self {
            OutcomeModel::Kernel(k) => k.predict(a, row),
            OutcomeModel::CellLinear { atoms, coefs, history } => {
                let k = atoms
                    .iter()
                    .position(|b| b == a)
                    .ok_or_else(|| Error::UnobservedAtom(format!("{a:?}")))?;
                let z = logistic_design(row, *history);
                Ok(z.iter().zip(&coefs[k]).map(|(p, q)| p * q).sum())
            }
            OutcomeModel::Function(f) => Ok(f(a, row)),
            OutcomeModel::Zero => Ok(0.0),
        }
    }
}

/// Per-atom weighted least squares of Y_{t+h} on (1, X_t[, history]). With
/// inverse-propensity weights the weighted residuals sum to zero within each
/// atom, so the AIPW augmentation vanishes and AIPW equals the plug-in.
pub fn fit_cell_linear(
    panel: &Panel,
    h: usize,
    atoms: &[Vec<f64>],
    history: bool,
    weights: Option<&PropensityModel>,
) -> Result<OutcomeModel> {
    panel.check_h(h)?;
    let mut coefs = Vec::with_capacity(atoms.len());
    for atom in atoms {
        let rows: Vec<&PanelRow> = panel.rows.iter().filter(|r| &r.a == atom).collect();
        if rows.is_empty() {
            return Err(Error::EmptyCell(format!("no rows with assignment {atom:?}")));
        }
        let p = logistic_design(rows[0], history).len();
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwy = DVector::zeros(p);
        for r in &rows {
            let w = match weights {
                Some(m) => {
                    let idx = m.atoms.iter().position(|b| b == atom).ok_or_else(|| Error::UnobservedAtom(format!("{atom:?}")))?;
                    1.0 / m.prob(panel, r, idx)?.0
                }
                None => 1.0,
            };
            let z = logistic_design(r, history);
            for i in 0..p {
                xtwy[i] += w * z[i] * r.leads[h];
                for j in 0..p {
                    xtwx[(i, j)] += w * z[i] * z[j];
                }
            }
        }
        let nr = rows.len() as f64;
        let inv = spd_inverse(&(&xtwx / nr), "cell outcome design")?;
        let beta = inv * (xtwy / nr);
        coefs.push(beta.iter().cloned().collect());
    }
    Ok(OutcomeModel::CellLinear {
        atoms: atoms.to_vec(),
        coefs,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AipwEstimate {
    pub estimate: EffectEstimate,
    /// Mean of μ̂(a) − μ̂(a′) over the rows.
    pub plug_in: f64,
    /// Sample mean of the estimated influence curve at the estimate.
    pub if_mean: f64,
    /// Rows where clipping changed a propensity.
    pub clipped: usize,
}

/// Augmented inverse-propensity estimate of ATE_h(a, a′).
pub fn aipw_ate(
    panel: &Panel,
    h: usize,
    a: &[f64],
    a_alt: &[f64],
    outcome: &OutcomeModel,
    propensity: &PropensityModel,
) -> Result<AipwEstimate> {
    panel.check_h(h)?;
    if panel.is_empty() {
        return Err(Error::EmptyCell("empty panel".into()));
    }
    let k1 = propensity
        .atoms
        .iter()
        .position(|b| b == a)
        .ok_or_else(|| Error::UnobservedAtom(format!("{a:?}")))?;
    let k0 = propensity
        .atoms
        .iter()
        .position(|b| b == a_alt)
        .ok_or_else(|| Error::UnobservedAtom(format!("{a_alt:?}")))?;
    let mut terms = Vec::with_capacity(panel.len());
    let mut plug = 0.0;
    let mut clipped = 0;
    for r in &panel.rows {
        let m1 = outcome.predict(a, r)?;
        let m0 = outcome.predict(a_alt, r)?;
        let y = r.leads[h];
        let mut v = m1 - m0;
        if r.a == a {
            let (p, c) = propensity.prob(panel, r, k1)?;
            clipped += usize::from(c);
            v += (y - m1) / p;
        } else if r.a == a_alt {
            let (p, c) = propensity.prob(panel, r, k0)?;
            clipped += usize::from(c);
            v -= (y - m0) / p;
        }
        plug += m1 - m0;
        terms.push(v);
    }
    let n = terms.len() as f64;
    let point = terms.iter().sum::<f64>() / n;
    let psi: Vec<f64> = terms.iter().map(|v| v - point).collect();
    let if_mean = psi.iter().sum::<f64>() / n;
    let var = mean_variance(panel, &psi, h, None);
    Ok(AipwEstimate {
        estimate: EffectEstimate {
            estimand: Estimand::Ate,
            h,
            contrast: (a.to_vec(), a_alt.to_vec()),
            point,
            stderr: var.max(0.0).sqrt(),
            method: "aipw".into(),
            n_obs: panel.len(),
        },
        plug_in: plug / n,
        if_mean,
        clipped,
    })
}
