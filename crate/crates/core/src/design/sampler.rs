use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{logistic_irls, rowmajor};
use crate::rng::{cell_rng, component};
use crate::simulator::Trajectory;
use crate::system::{assignment_law, DataRecord, StructuralModel, SystemSpec};

type CustomDraw = dyn Fn(&[DataRecord], &[f64], &mut ChaCha8Rng) -> Vec<f64> + Send + Sync;

/// Sampler for A*_t given the (imputed) history window and X_t.
#[derive(Clone)]
pub enum SamSampler {
    /// The generating assignment mechanism, re-run with fresh V on the
    /// imputed history (experimental case).
    Known(Arc<SystemSpec>),
    /// Independent draws from fixed atom probabilities.
    IidEmpirical { atoms: Vec<Vec<f64>>, probs: Vec<f64> },
    /// Binary logistic law of 1{A_t = atoms[1]} on (1, X_t, D_{t-lags:t-1}).
    Logistic(LogisticSam),
    Custom {
        order: usize,
        atoms: Option<Vec<Vec<f64>>>,
        draw: Arc<CustomDraw>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticSam {
    pub atoms: Vec<Vec<f64>>,
    pub lags: usize,
    pub coef: Vec<f64>,
    #[serde(with = "rowmajor")]
    pub cov: DMatrix<f64>,
    pub stderr: Vec<f64>,
    pub n_obs: usize,
}

impl std::fmt::Debug for SamSampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SamSampler::Known(_) => write!(f, "known"),
            SamSampler::IidEmpirical { atoms, probs } => write!(f, "iid_empirical({atoms:?}, {probs:?})"),
            SamSampler::Logistic(l) => write!(f, "logistic(lags={}, coef={:?})", l.lags, l.coef),
            SamSampler::Custom { order, .. } => write!(f, "custom(order={order})"),
        }
    }
}

/// Families accepted by [`fit_sam_sampler`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamFamily {
    IidEmpirical,
    Logistic { lags: usize },
}

fn logistic_features(window: &[DataRecord], x: &[f64]) -> Vec<f64> {
    let mut z = vec![1.0];
    z.extend_from_slice(x);
    for r in window {
        z.extend(r.stacked());
    }
    z
}

fn pick(probs: &[f64], atoms: &[Vec<f64>], u: f64) -> Vec<f64> {
    let mut acc = 0.0;
    for (p, a) in probs.iter().zip(atoms) {
        acc += p;
        if u < acc {
            return a.clone();
        }
    }
    atoms.last().cloned().unwrap_or_default()
}

impl SamSampler {
    /// Number of past records the sampler looks at.
    pub fn order(&self) -> usize {
        match self {
            SamSampler::Known(spec) => spec.order(),
            SamSampler::IidEmpirical { .. } => 0,
            SamSampler::Logistic(l) => l.lags,
            SamSampler::Custom { order, .. } => *order,
        }
    }

    pub fn atoms(&self) -> Option<Vec<Vec<f64>>> {
        match self {
            SamSampler::Known(spec) => spec.spaces.atoms(),
            SamSampler::IidEmpirical { atoms, .. } => Some(atoms.clone()),
            SamSampler::Logistic(l) => Some(l.atoms.clone()),
            SamSampler::Custom { atoms, .. } => atoms.clone(),
        }
    }

    /// Pre-sample records; zero records unless the sampler carries a system.
    pub fn padding(&self, like: &DataRecord) -> Vec<DataRecord> {
        if let SamSampler::Known(spec) = self {
            return spec.padding();
        }
        let m = self.order() as i64;
        (0..m)
            .map(|i| DataRecord {
                t: i + 1 - m,
                x: vec![0.0; like.x.len()],
                a: vec![0.0; like.a.len()],
                y: vec![0.0; like.y.len()],
            })
            .collect()
    }

    /// Conditional probabilities over [`SamSampler::atoms`], when available.
    pub fn law(&self, window: &[DataRecord], x: &[f64]) -> Result<Option<Vec<f64>>> {
        match self {
            SamSampler::Known(spec) => assignment_law(spec, window, x).map(Some),
            SamSampler::IidEmpirical { probs, .. } => Ok(Some(probs.clone())),
            SamSampler::Logistic(l) => {
                let z = logistic_features(&window[window.len() - l.lags..], x);
                if z.len() != l.coef.len() {
                    return Err(Error::dim("logistic sampler features", l.coef.len(), z.len()));
                }
                let eta: f64 = z.iter().zip(&l.coef).map(|(a, b)| a * b).sum();
                let p1 = 1.0 / (1.0 + (-eta).exp());
                Ok(Some(vec![1.0 - p1, p1]))
            }
            SamSampler::Custom { .. } => Ok(None),
        }
    }

    /// Draws A*_t from counter cell (seed, stream, t).
    pub fn draw(&self, window: &[DataRecord], x: &[f64], seed: u64, stream: u64, t: usize) -> Result<Vec<f64>> {
        let tt = t as u64;
        let a = match self {
            SamSampler::Known(spec) => {
                let m = spec.order();
                let v = spec.noise.draw_v_from(seed, stream, tt, component::RESAMPLE);
                let a = spec.sem.assignment(&window[window.len() - m..], x, &v);
                if !spec.spaces.assignment_contains(&a) {
                    return Err(Error::Domain {
                        component: "sam sampler".into(),
                        value: a,
                    });
                }
                return Ok(a);
            }
            SamSampler::IidEmpirical { atoms, probs } => {
                let u: f64 = cell_rng(seed, stream, tt, component::SAM).random();
                pick(probs, atoms, u)
            }
            SamSampler::Logistic(l) => {
                let probs = self.law(window, x)?.unwrap_or_default();
                let u: f64 = cell_rng(seed, stream, tt, component::SAM).random();
                pick(&probs, &l.atoms, u)
            }
            SamSampler::Custom { draw, .. } => {
                let mut rng = cell_rng(seed, stream, tt, component::SAM);
                draw(window, x, &mut rng)
            }
        };
        if let Some(atoms) = self.atoms() {
            if !atoms.contains(&a) {
                return Err(Error::Domain {
                    component: "sam sampler".into(),
                    value: a,
                });
            }
        }
        Ok(a)
    }
}

/// Fits a sampler from observed trajectories over the declared `atoms`.
pub fn fit_sam_sampler(trajs: &[Trajectory], family: SamFamily, atoms: &[Vec<f64>]) -> Result<SamSampler> {
    if atoms.len() < 2 {
        return Err(Error::InvalidArgument("a sampler needs at least two atoms".into()));
    }
    let all: Vec<&DataRecord> = trajs.iter().flat_map(|t| t.records.iter()).collect();
    if all.is_empty() {
        return Err(Error::EmptyCell("no observations".into()));
    }
    let mut counts = vec![0usize; atoms.len()];
    for r in &all {
        let k = atoms
            .iter()
            .position(|a| *a == r.a)
            .ok_or_else(|| Error::Domain {
                component: "observed assignment".into(),
                value: r.a.clone(),
            })?;
        counts[k] += 1;
    }
    if counts.iter().filter(|c| **c > 0).count() < 2 {
        return Err(Error::DegenerateSam("only one assignment atom observed".into()));
    }
    match family {
        SamFamily::IidEmpirical => {
            if let Some(k) = counts.iter().position(|c| *c == 0) {
                return Err(Error::UnobservedAtom(format!("{:?}", atoms[k])));
            }
            let n = all.len() as f64;
            Ok(SamSampler::IidEmpirical {
                atoms: atoms.to_vec(),
                probs: counts.iter().map(|c| *c as f64 / n).collect(),
            })
        }
        SamFamily::Logistic { lags } => {
            if atoms.len() != 2 {
                return Err(Error::InvalidArgument("logistic sampler needs exactly two atoms".into()));
            }
            let mut rows = Vec::new();
            let mut y = Vec::new();
            for tr in trajs {
                for i in lags..tr.records.len() {
                    let r = &tr.records[i];
                    rows.push(logistic_features(&tr.records[i - lags..i], &r.x));
                    y.push(f64::from(r.a == atoms[1]));
                }
            }
            if rows.is_empty() {
                return Err(Error::EmptyCell("no rows with a full lag window".into()));
            }
            let k = rows[0].len();
            let x = DMatrix::from_row_iterator(rows.len(), k, rows.into_iter().flatten());
            let (coef, cov) = logistic_irls(&x, &y)?;
            Ok(SamSampler::Logistic(LogisticSam {
                atoms: atoms.to_vec(),
                lags,
                coef: coef.iter().cloned().collect(),
                stderr: (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
                cov,
                n_obs: y.len(),
            }))
        }
    }
}
