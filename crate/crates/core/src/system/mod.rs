//! The potential-system contract: spaces, SEM components, noise and records.

pub mod noise;
pub mod sem;

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub use noise::{CrossDependence, Distribution, NoiseDraw, NoiseModel};
pub use sem::{IvEncouragement, NewsResponse, ProxyAssignment, SemModel, StructuralModel};

/// Domain of the assignment A_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssignmentDomain {
    /// Scalar {0, 1}.
    Binary,
    FiniteAtoms { atoms: Vec<Vec<f64>> },
    Continuous { lower: Vec<f64>, upper: Vec<f64> },
    Unbounded,
}

/// Box bounds for features or outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BoxDomain {
    #[default]
    Unbounded,
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl BoxDomain {
    pub fn contains(&self, v: &[f64]) -> bool {
        match self {
            BoxDomain::Unbounded => v.iter().all(|x| !x.is_nan()),
            BoxDomain::Box { lower, upper } => {
                v.len() == lower.len() && v.iter().zip(lower.iter().zip(upper)).all(|(x, (l, u))| *l <= *x && *x <= *u)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spaces {
    pub dx: usize,
    pub da: usize,
    pub dy: usize,
    pub assignment: AssignmentDomain,
    #[serde(default)]
    pub feature: BoxDomain,
    #[serde(default)]
    pub outcome: BoxDomain,
}

impl Spaces {
    pub fn new(dx: usize, da: usize, dy: usize, assignment: AssignmentDomain) -> Self {
        Spaces {
            dx,
            da,
            dy,
            assignment,
            feature: BoxDomain::Unbounded,
            outcome: BoxDomain::Unbounded,
        }
    }

    /// Assignment atoms for finite domains, in declaration order.
    pub fn atoms(&self) -> Option<Vec<Vec<f64>>> {
        match &self.assignment {
            AssignmentDomain::Binary => Some(vec![vec![0.0], vec![1.0]]),
            AssignmentDomain::FiniteAtoms { atoms } => Some(atoms.clone()),
            _ => None,
        }
    }

    pub fn is_finite_assignment(&self) -> bool {
        self.atoms().is_some()
    }

    pub fn assignment_contains(&self, a: &[f64]) -> bool {
        if a.len() != self.da {
            return false;
        }
        match &self.assignment {
            AssignmentDomain::Binary => a[0] == 0.0 || a[0] == 1.0,
            AssignmentDomain::FiniteAtoms { atoms } => atoms.iter().any(|p| p.as_slice() == a),
            AssignmentDomain::Continuous { lower, upper } => {
                a.iter().zip(lower.iter().zip(upper)).all(|(x, (l, u))| *l <= *x && *x <= *u)
            }
            AssignmentDomain::Unbounded => a.iter().all(|x| !x.is_nan()),
        }
    }

    /// Index of `a` among the finite atoms.
    pub fn atom_index(&self, a: &[f64]) -> Option<usize> {
        self.atoms()?.iter().position(|p| p.as_slice() == a)
    }

    pub fn state_dim(&self) -> usize {
        self.dx + self.da + self.dy
    }
}

/// One period of data D_t = (X_t, A_t, Y_t). Padding records carry t ≤ 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub t: i64,
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
}

impl DataRecord {
    pub fn zeros(t: i64, spaces: &Spaces) -> Self {
        DataRecord {
            t,
            x: vec![0.0; spaces.dx],
            a: vec![0.0; spaces.da],
            y: vec![0.0; spaces.dy],
        }
    }

    /// (x, a, y) stacked in block order.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.x.len() + self.a.len() + self.y.len());
        v.extend_from_slice(&self.x);
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.y);
        v
    }
}

/// Full description of a potential system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemSpec {
    pub spaces: Spaces,
    pub noise: NoiseModel,
    pub sem: SemModel,
    pub horizon: usize,
    /// D_{1-m:0}; empty means zeros.
    #[serde(default)]
    pub initial_history: Vec<DataRecord>,
}

impl SystemSpec {
    pub fn order(&self) -> usize {
        self.sem.order()
    }

    /// The padding window D_{1-m:0}.
    pub fn padding(&self) -> Vec<DataRecord> {
        if !self.initial_history.is_empty() {
            return self.initial_history.clone();
        }
        let m = self.order() as i64;
        (0..m).map(|i| DataRecord::zeros(i + 1 - m, &self.spaces)).collect()
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        if matches!(self.sem, SemModel::Custom(_)) {
            return Err(Error::Serde("custom structural models are not serialisable".into()));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A broken invariant found by [`validate_system`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Dimension { at: String, expected: usize, got: usize },
    Covariance { at: String },
    Bounds { at: String },
    EmptyAtoms { at: String },
    DuplicateAtoms { at: String },
    ProbSum { at: String, sum: f64 },
    CrossDependence(String),
    Domain { at: String, value: Vec<f64> },
    Horizon,
    InitialHistory(String),
    Probe(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension { at, expected, got } => {
                write!(f, "dimension violation at {at}: expected {expected}, got {got}")
            }
            Violation::Covariance { at } => write!(f, "{at}: covariance is not symmetric PSD"),
            Violation::Bounds { at } => write!(f, "{at}: lower bound exceeds upper bound"),
            Violation::EmptyAtoms { at } => write!(f, "{at}: empty atom list"),
            Violation::DuplicateAtoms { at } => write!(f, "{at}: duplicated atoms"),
            Violation::ProbSum { at, sum } => write!(f, "{at}: probabilities sum to {sum}"),
            Violation::CrossDependence(s) => write!(f, "cross dependence: {s}"),
            Violation::Domain { at, value } => write!(f, "{at} output {value:?} outside its domain"),
            Violation::Horizon => write!(f, "horizon must be at least 1"),
            Violation::InitialHistory(s) => write!(f, "initial history: {s}"),
            Violation::Probe(s) => write!(f, "probe evaluation failed: {s}"),
        }
    }
}

fn box_violations(d: &BoxDomain, dim: usize, at: &str, out: &mut Vec<Violation>) {
    if let BoxDomain::Box { lower, upper } = d {
        if lower.len() != dim || upper.len() != dim {
            out.push(Violation::Dimension {
                at: at.to_string(),
                expected: dim,
                got: if lower.len() != dim { lower.len() } else { upper.len() },
            });
        } else if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
            out.push(Violation::Bounds { at: at.to_string() });
        }
    }
}

fn record_dim_violations(r: &DataRecord, spaces: &Spaces, at: &str, out: &mut Vec<Violation>) {
    for (name, got, expected) in [("x", r.x.len(), spaces.dx), ("a", r.a.len(), spaces.da), ("y", r.y.len(), spaces.dy)] {
        if got != expected {
            out.push(Violation::Dimension {
                at: format!("{at}.{name}"),
                expected,
                got,
            });
        }
    }
}

/// Checks every invariant of `spec`, then probes (χ, α, γ) on the padding
/// with zero noise. Returns all violations found; empty means valid.
pub fn validate_system(spec: &SystemSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let sp = &spec.spaces;
    if sp.da == 0 {
        out.push(Violation::Dimension {
            at: "spaces.da".into(),
            expected: 1,
            got: 0,
        });
    }
    match &sp.assignment {
        AssignmentDomain::Binary => {
            if sp.da != 1 {
                out.push(Violation::Dimension {
                    at: "spaces.assignment".into(),
                    expected: 1,
                    got: sp.da,
                });
            }
        }
        AssignmentDomain::FiniteAtoms { atoms } => {
            if atoms.is_empty() {
                out.push(Violation::EmptyAtoms { at: "spaces.assignment".into() });
            }
            if let Some(p) = atoms.iter().find(|p| p.len() != sp.da) {
                out.push(Violation::Dimension {
                    at: "spaces.assignment.atoms".into(),
                    expected: sp.da,
                    got: p.len(),
                });
            }
            for i in 0..atoms.len() {
                if atoms[..i].contains(&atoms[i]) {
                    out.push(Violation::DuplicateAtoms { at: "spaces.assignment".into() });
                    break;
                }
            }
        }
        AssignmentDomain::Continuous { lower, upper } => {
            box_violations(
                &BoxDomain::Box {
                    lower: lower.clone(),
                    upper: upper.clone(),
                },
                sp.da,
                "spaces.assignment",
                &mut out,
            );
        }
        AssignmentDomain::Unbounded => {}
    }
    box_violations(&sp.feature, sp.dx, "spaces.feature", &mut out);
    box_violations(&sp.outcome, sp.dy, "spaces.outcome", &mut out);
    spec.noise.violations(&mut out);
    if spec.horizon == 0 {
        out.push(Violation::Horizon);
    }
    let m = spec.order();
    if !spec.initial_history.is_empty() {
        if spec.initial_history.len() != m {
            out.push(Violation::InitialHistory(format!(
                "{} records supplied, order is {m}",
                spec.initial_history.len()
            )));
        }
        for r in &spec.initial_history {
            record_dim_violations(r, sp, "initial_history", &mut out);
        }
    }
    out.extend(spec.sem.check_dims(sp, spec.noise.dims()));
    if !out.is_empty() {
        return out;
    }

    let (du, dv, dw) = spec.noise.dims();
    let padding = spec.padding();
    let zero = NoiseDraw::zeros(du, dv, dw);
    let probe = catch_unwind(AssertUnwindSafe(|| {
        let x = spec.sem.feature(&padding, &zero.u);
        let a = if x.len() == sp.dx {
            spec.sem.assignment(&padding, &x, &zero.v)
        } else {
            vec![0.0; sp.da]
        };
        let y = if a.len() == sp.da && x.len() == sp.dx {
            spec.sem.outcome(&padding, &x, &a, &zero.w)
        } else {
            vec![0.0; sp.dy]
        };
        (x, a, y)
    }));
    match probe {
        Err(_) => out.push(Violation::Probe("structural component panicked".into())),
        Ok((x, a, y)) => {
            let checks = [("chi", &x, sp.dx), ("alpha", &a, sp.da), ("gamma", &y, sp.dy)];
            for (at, v, d) in checks {
                if v.len() != d {
                    out.push(Violation::Dimension {
                        at: at.into(),
                        expected: d,
                        got: v.len(),
                    });
                }
            }
            if out.is_empty() {
                if !sp.feature.contains(&x) {
                    out.push(Violation::Domain { at: "chi".into(), value: x });
                }
                if !sp.assignment_contains(&a) {
                    out.push(Violation::Domain { at: "alpha".into(), value: a });
                }
                if !sp.outcome.contains(&y) {
                    out.push(Violation::Domain { at: "gamma".into(), value: y });
                }
            }
        }
    }
    out
}

/// Noise draw for period `t` of replication `replication`.
pub fn draw_noise(spec: &SystemSpec, seed: u64, replication: u64, t: usize) -> Result<NoiseDraw> {
    if t == 0 || t > spec.horizon {
        return Err(Error::TimeOutOfRange {
            t,
            horizon: spec.horizon,
        });
    }
    Ok(spec.noise.draw(seed, replication, t))
}

/// Optional overrides applied during a step; used to build branches.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides<'a> {
    pub x: Option<&'a [f64]>,
    pub a: Option<&'a [f64]>,
}

/// One DGP step: (χ(hist, u), α(hist, x, v), γ(hist, x, a, w)).
/// `history` must hold at least `order` records, oldest first; only the last
/// `order` are visible to the model.
pub fn step_dgp(spec: &SystemSpec, history: &[DataRecord], noise: &NoiseDraw) -> Result<DataRecord> {
    step_with(spec, history, noise, Overrides::default())
}

pub fn step_with(spec: &SystemSpec, history: &[DataRecord], noise: &NoiseDraw, ov: Overrides<'_>) -> Result<DataRecord> {
    let m = spec.order();
    if history.len() < m {
        return Err(Error::ShortHistory {
            got: history.len(),
            need: m,
        });
    }
    let window = &history[history.len() - m..];
    let sp = &spec.spaces;
    let x = match ov.x {
        Some(x) => x.to_vec(),
        None => spec.sem.feature(window, &noise.u),
    };
    check_output("chi", &x, sp.dx, sp.feature.contains(&x))?;
    let a = match ov.a {
        Some(a) => a.to_vec(),
        None => spec.sem.assignment(window, &x, &noise.v),
    };
    check_output("alpha", &a, sp.da, sp.assignment_contains(&a))?;
    let y = spec.sem.outcome(window, &x, &a, &noise.w);
    check_output("gamma", &y, sp.dy, sp.outcome.contains(&y))?;
    let t = history.last().map_or(1, |r| r.t + 1);
    Ok(DataRecord { t, x, a, y })
}

fn check_output(component: &str, v: &[f64], dim: usize, in_domain: bool) -> Result<()> {
    if v.len() != dim {
        return Err(Error::dim(component, dim, v.len()));
    }
    if !in_domain {
        return Err(Error::Domain {
            component: component.to_string(),
            value: v.to_vec(),
        });
    }
    Ok(())
}

/// Conditional law of A_t given the history window and x_t, over the finite
/// assignment atoms. Available when V is discrete and independent of (U, W),
/// for the binary-linear threshold family with Gaussian V, and for the
/// encouragement design.
pub fn assignment_law(spec: &SystemSpec, history: &[DataRecord], x: &[f64]) -> Result<Vec<f64>> {
    let atoms = spec
        .spaces
        .atoms()
        .ok_or_else(|| Error::InvalidArgument("assignment law needs a finite assignment domain".into()))?;
    let m = spec.order();
    if history.len() < m {
        return Err(Error::ShortHistory {
            got: history.len(),
            need: m,
        });
    }
    let window = &history[history.len() - m..];
    let mut probs = vec![0.0; atoms.len()];
    match (&spec.sem, &spec.noise.v, &spec.noise.cross) {
        (SemModel::IvEncouragement(iv), _, _) => {
            let p1 = if x[0] > 0.5 { iv.compliance } else { 0.0 };
            probs[0] = 1.0 - p1;
            probs[1] = p1;
        }
        (SemModel::BinaryLinear { structural, threshold }, Distribution::Gaussian { mean, covariance }, _) => {
            let zero_v = vec![0.0; mean.len()];
            let base = SemModel::Linear(structural.clone()).assignment(window, x, &zero_v)[0];
            let g = structural.gamma.row(0);
            let loc = base + (0..mean.len()).map(|j| g[j] * mean[j]).sum::<f64>();
            let var = (g * covariance * g.transpose())[(0, 0)];
            let p1 = if var <= 0.0 {
                if loc > *threshold {
                    1.0
                } else {
                    0.0
                }
            } else {
                1.0 - Normal::standard().cdf((threshold - loc) / var.sqrt())
            };
            probs[0] = 1.0 - p1;
            probs[1] = p1;
        }
        (_, Distribution::Discrete { points, probs: pv }, CrossDependence::FullyIndependent) => {
            for (v, p) in points.iter().zip(pv) {
                let a = spec.sem.assignment(window, x, v);
                let i = spec.spaces.atom_index(&a).ok_or_else(|| Error::Domain {
                    component: "alpha".into(),
                    value: a.clone(),
                })?;
                probs[i] += p;
            }
        }
        _ => {
            return Err(Error::InvalidArgument(
                "assignment law is not available in closed form for this system".into(),
            ))
        }
    }
    Ok(probs)
}
