//! Structural noise ε_t = (U_t, V_t, W_t) and its counter-based sampler.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::rowmajor;
use crate::rng::{cell_rng, component};

use super::Violation;

/// Marginal law of one noise block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Distribution {
    Gaussian {
        mean: Vec<f64>,
        #[serde(with = "rowmajor")]
        covariance: DMatrix<f64>,
    },
    /// Independent uniforms per coordinate.
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    Discrete { points: Vec<Vec<f64>>, probs: Vec<f64> },
}

impl Distribution {
    /// A zero-dimensional block.
    pub fn empty() -> Self {
        Distribution::Gaussian {
            mean: vec![],
            covariance: DMatrix::zeros(0, 0),
        }
    }

    pub fn standard_normal(dim: usize) -> Self {
        Distribution::Gaussian {
            mean: vec![0.0; dim],
            covariance: DMatrix::identity(dim, dim),
        }
    }

    pub fn normal(mean: f64, variance: f64) -> Self {
        Distribution::Gaussian {
            mean: vec![mean],
            covariance: DMatrix::from_element(1, 1, variance),
        }
    }

    pub fn bernoulli(p: f64) -> Self {
        Distribution::Discrete {
            points: vec![vec![0.0], vec![1.0]],
            probs: vec![1.0 - p, p],
        }
    }

    /// Scalar point mass, handy for deterministic inputs.
    pub fn constant(value: f64) -> Self {
        Distribution::Discrete {
            points: vec![vec![value]],
            probs: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian { mean, .. } => mean.len(),
            Distribution::Uniform { lo, .. } => lo.len(),
            Distribution::Discrete { points, .. } => points.first().map_or(0, |p| p.len()),
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, Distribution::Gaussian { .. })
    }

    /// E|e|^2 of the block.
    pub fn second_moment(&self) -> f64 {
        match self {
            Distribution::Gaussian { mean, covariance } => {
                mean.iter().map(|m| m * m).sum::<f64>() + covariance.trace()
            }
            Distribution::Uniform { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| (a * a + a * b + b * b) / 3.0)
                .sum(),
            Distribution::Discrete { points, probs } => points
                .iter()
                .zip(probs)
                .map(|(x, p)| p * x.iter().map(|v| v * v).sum::<f64>())
                .sum(),
        }
    }

    fn violations(&self, name: &str, out: &mut Vec<Violation>) {
        match self {
            Distribution::Gaussian { mean, covariance } => {
                if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
                    out.push(Violation::Dimension {
                        at: format!("{name}.covariance"),
                        expected: mean.len(),
                        got: covariance.nrows(),
                    });
                } else if !is_psd(covariance) {
                    out.push(Violation::Covariance { at: name.to_string() });
                }
            }
            Distribution::Uniform { lo, hi } => {
                if lo.len() != hi.len() {
                    out.push(Violation::Dimension {
                        at: format!("{name}.hi"),
                        expected: lo.len(),
                        got: hi.len(),
                    });
                } else if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                    out.push(Violation::Bounds { at: name.to_string() });
                }
            }
            Distribution::Discrete { points, probs } => {
                if points.is_empty() {
                    out.push(Violation::EmptyAtoms { at: name.to_string() });
                    return;
                }
                if points.len() != probs.len() {
                    out.push(Violation::Dimension {
                        at: format!("{name}.probs"),
                        expected: points.len(),
                        got: probs.len(),
                    });
                }
                let d = points[0].len();
                if points.iter().any(|p| p.len() != d) {
                    out.push(Violation::Dimension {
                        at: format!("{name}.points"),
                        expected: d,
                        got: points.iter().map(|p| p.len()).find(|&l| l != d).unwrap_or(d),
                    });
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > 1e-12 || probs.iter().any(|p| *p < 0.0) {
                    out.push(Violation::ProbSum {
                        at: name.to_string(),
                        sum,
                    });
                }
            }
        }
    }

    fn sample<R: Rng>(&self, factor: Option<&DMatrix<f64>>, rng: &mut R) -> Vec<f64> {
        match self {
            Distribution::Gaussian { mean, .. } => {
                let z: DVector<f64> =
                    DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample(StandardNormal)));
                let f = factor.expect("gaussian factor");
                let e = f * z;
                mean.iter().zip(e.iter()).map(|(m, v)| m + v).collect()
            }
            Distribution::Uniform { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                .collect(),
            Distribution::Discrete { points, probs } => {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                for (p, x) in probs.iter().zip(points) {
                    acc += p;
                    if r < acc {
                        return x.clone();
                    }
                }
                points.last().cloned().unwrap_or_default()
            }
        }
    }

    fn mean_vec(&self) -> Vec<f64> {
        match self {
            Distribution::Gaussian { mean, .. } => mean.clone(),
            _ => vec![0.0; self.dim()],
        }
    }
}

/// How the three blocks depend on each other within a period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CrossDependence {
    #[default]
    FullyIndependent,
    /// Correlation matrix over the stacked (V, W) block. Both blocks must be
    /// Gaussian; their covariance diagonals give the marginal scales.
    VwCorrelated {
        #[serde(with = "rowmajor")]
        correlation: DMatrix<f64>,
    },
    /// Joint Gaussian covariance over (U, V, W); all blocks must be Gaussian
    /// and contribute their means.
    Custom {
        #[serde(with = "rowmajor")]
        covariance: DMatrix<f64>,
    },
}

/// Noise model for ε_t, independent over t.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseModel {
    pub u: Distribution,
    pub v: Distribution,
    pub w: Distribution,
    #[serde(default)]
    pub cross: CrossDependence,
    #[serde(skip)]
    factors: OnceLock<Factors>,
}

impl PartialEq for NoiseModel {
    fn eq(&self, other: &Self) -> bool {
        self.u == other.u && self.v == other.v && self.w == other.w && self.cross == other.cross
    }
}

#[derive(Debug, Clone)]
struct Factors {
    u: Option<DMatrix<f64>>,
    v: Option<DMatrix<f64>>,
    w: Option<DMatrix<f64>>,
    joint: Option<DMatrix<f64>>,
}

/// One realisation of ε_t together with the counter cell that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    /// (replication, t)
    pub stream: (u64, usize),
}

impl NoiseDraw {
    pub fn zeros(du: usize, dv: usize, dw: usize) -> Self {
        NoiseDraw {
            u: vec![0.0; du],
            v: vec![0.0; dv],
            w: vec![0.0; dw],
            stream: (0, 0),
        }
    }
}

/// Symmetric PSD square root `F` with `F F' = S` via the eigendecomposition.
/// Tolerates singular covariances.
pub fn psd_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    if s.nrows() == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = s.clone().symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

pub(crate) fn is_psd(s: &DMatrix<f64>) -> bool {
    if s.nrows() == 0 {
        return true;
    }
    let asym = (s - s.transpose()).abs().max();
    let scale = s.abs().max().max(1.0);
    if asym > 1e-12 * scale {
        return false;
    }
    let eig = s.clone().symmetric_eigen();
    eig.eigenvalues.iter().all(|l| *l >= -1e-10 * scale)
}

impl NoiseModel {
    pub fn new(u: Distribution, v: Distribution, w: Distribution) -> Self {
        NoiseModel {
            u,
            v,
            w,
            cross: CrossDependence::FullyIndependent,
            factors: OnceLock::new(),
        }
    }

    pub fn with_cross(mut self, cross: CrossDependence) -> Self {
        self.cross = cross;
        self.factors = OnceLock::new();
        self
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.u.dim(), self.v.dim(), self.w.dim())
    }

    /// E|ε_t|^2; cross dependence leaves the marginals unchanged.
    pub fn second_moment(&self) -> f64 {
        self.u.second_moment() + self.v.second_moment() + self.w.second_moment()
    }

    pub(crate) fn violations(&self, out: &mut Vec<Violation>) {
        self.u.violations("noise.u", out);
        self.v.violations("noise.v", out);
        self.w.violations("noise.w", out);
        let (du, dv, dw) = self.dims();
        match &self.cross {
            CrossDependence::FullyIndependent => {}
            CrossDependence::VwCorrelated { correlation } => {
                if !(self.v.is_gaussian() && self.w.is_gaussian()) {
                    out.push(Violation::CrossDependence(
                        "vw_correlated requires Gaussian V and W".into(),
                    ));
                }
                if correlation.nrows() != dv + dw || correlation.ncols() != dv + dw {
                    out.push(Violation::Dimension {
                        at: "noise.cross.correlation".into(),
                        expected: dv + dw,
                        got: correlation.nrows(),
                    });
                } else {
                    if !is_psd(correlation) {
                        out.push(Violation::Covariance {
                            at: "noise.cross.correlation".into(),
                        });
                    }
                    if correlation.diagonal().iter().any(|d| (d - 1.0).abs() > 1e-12) {
                        out.push(Violation::CrossDependence(
                            "correlation diagonal must be 1".into(),
                        ));
                    }
                }
            }
            CrossDependence::Custom { covariance } => {
                if !(self.u.is_gaussian() && self.v.is_gaussian() && self.w.is_gaussian()) {
                    out.push(Violation::CrossDependence(
                        "custom joint covariance requires Gaussian U, V and W".into(),
                    ));
                }
                if covariance.nrows() != du + dv + dw || covariance.ncols() != du + dv + dw {
                    out.push(Violation::Dimension {
                        at: "noise.cross.covariance".into(),
                        expected: du + dv + dw,
                        got: covariance.nrows(),
                    });
                } else if !is_psd(covariance) {
                    out.push(Violation::Covariance {
                        at: "noise.cross.covariance".into(),
                    });
                }
            }
        }
    }

    fn factors(&self) -> &Factors {
        self.factors.get_or_init(|| {
            let block = |d: &Distribution| match d {
                Distribution::Gaussian { covariance, .. } => Some(psd_factor(covariance)),
                _ => None,
            };
            let joint = match &self.cross {
                CrossDependence::FullyIndependent => None,
                CrossDependence::VwCorrelated { correlation } => {
                    let mut scales = Vec::new();
                    for d in [&self.v, &self.w] {
                        if let Distribution::Gaussian { covariance, .. } = d {
                            scales.extend(covariance.diagonal().iter().map(|s| s.max(0.0).sqrt()));
                        }
                    }
                    let s = DMatrix::from_diagonal(&DVector::from_vec(scales));
                    Some(psd_factor(&(&s * correlation * &s)))
                }
                CrossDependence::Custom { covariance } => Some(psd_factor(covariance)),
            };
            Factors {
                u: block(&self.u),
                v: block(&self.v),
                w: block(&self.w),
                joint,
            }
        })
    }

    /// Draws ε_t for counter cell (seed, replication, t).
    pub fn draw(&self, seed: u64, replication: u64, t: usize) -> NoiseDraw {
        let f = self.factors();
        let tt = t as u64;
        let (du, dv, dw) = self.dims();
        let (u, v, w) = match &self.cross {
            CrossDependence::FullyIndependent => (
                self.u.sample(f.u.as_ref(), &mut cell_rng(seed, replication, tt, component::FEATURE)),
                self.v.sample(f.v.as_ref(), &mut cell_rng(seed, replication, tt, component::ASSIGNMENT)),
                self.w.sample(f.w.as_ref(), &mut cell_rng(seed, replication, tt, component::OUTCOME)),
            ),
            CrossDependence::VwCorrelated { .. } => {
                let u = self.u.sample(f.u.as_ref(), &mut cell_rng(seed, replication, tt, component::FEATURE));
                let mean: Vec<f64> = self.v.mean_vec().into_iter().chain(self.w.mean_vec()).collect();
                let vw = joint_gaussian(&mean, f.joint.as_ref().unwrap(), seed, replication, tt);
                (u, vw[..dv].to_vec(), vw[dv..dv + dw].to_vec())
            }
            CrossDependence::Custom { .. } => {
                let mean: Vec<f64> = self
                    .u
                    .mean_vec()
                    .into_iter()
                    .chain(self.v.mean_vec())
                    .chain(self.w.mean_vec())
                    .collect();
                let e = joint_gaussian(&mean, f.joint.as_ref().unwrap(), seed, replication, tt);
                (e[..du].to_vec(), e[du..du + dv].to_vec(), e[du + dv..].to_vec())
            }
        };
        NoiseDraw {
            u,
            v,
            w,
            stream: (replication, t),
        }
    }

    /// Draws a fresh V block only, from an arbitrary counter cell. Used when an
    /// assignment mechanism is re-run on imputed histories.
    pub fn draw_v_from(&self, seed: u64, replication: u64, t: u64, comp: u64) -> Vec<f64> {
        let f = self.factors();
        match &self.cross {
            CrossDependence::FullyIndependent => {
                self.v.sample(f.v.as_ref(), &mut cell_rng(seed, replication, t, comp))
            }
            _ => {
                // marginal of V under the joint law
                let full = self.draw(seed ^ comp.rotate_left(17), replication, t as usize);
                full.v
            }
        }
    }

    /// Enumerates the joint atoms of (U, W) with probabilities, when both are
    /// discrete and independent of each other.
    pub fn uw_atoms(&self) -> Result<Vec<(Vec<f64>, Vec<f64>, f64)>> {
        if self.cross != CrossDependence::FullyIndependent {
            return Err(Error::InvalidSystem("noise atoms need independent blocks".into()));
        }
        let atoms = |d: &Distribution, name: &str| -> Result<Vec<(Vec<f64>, f64)>> {
            match d {
                Distribution::Discrete { points, probs } => {
                    Ok(points.iter().cloned().zip(probs.iter().cloned()).collect())
                }
                Distribution::Gaussian { mean, .. } if mean.is_empty() => Ok(vec![(vec![], 1.0)]),
                _ => Err(Error::InvalidSystem(format!("{name} block is not discrete"))),
            }
        };
        let us = atoms(&self.u, "U")?;
        let ws = atoms(&self.w, "W")?;
        let mut out = Vec::with_capacity(us.len() * ws.len());
        for (u, pu) in &us {
            for (w, pw) in &ws {
                out.push((u.clone(), w.clone(), pu * pw));
            }
        }
        Ok(out)
    }
}

fn joint_gaussian(mean: &[f64], factor: &DMatrix<f64>, seed: u64, rep: u64, t: u64) -> Vec<f64> {
    let mut rng = cell_rng(seed, rep, t, component::JOINT);
    let z = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample(StandardNormal)));
    let e = factor * z;
    mean.iter().zip(e.iter()).map(|(m, v)| m + v).collect()
}
