//! Realised trajectories, counterfactual branches and Monte Carlo oracles
//! for the dynamic causal effects of a potential system.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean, sample_sd};
use crate::rng::{cell_rng, component};
use crate::system::{step_with, AssignmentDomain, DataRecord, NoiseDraw, Overrides, Spaces, SystemSpec};

/// Realised path D_{1:T}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<DataRecord>,
    pub seed: u64,
    pub replication: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record for period t (1-based).
    pub fn at(&self, t: usize) -> &DataRecord {
        &self.records[t - 1]
    }

    /// First coordinate of the outcome, for t = 1..T.
    pub fn y0(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y[0]).collect()
    }

    pub fn a0(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.a[0]).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_records(w, "t", self.records.iter().map(|r| (r.t, r)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn write_records<'a, W: Write>(
    w: W,
    index: &str,
    rows: impl Iterator<Item = (i64, &'a DataRecord)>,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header_done = false;
    for (i, r) in rows {
        if !header_done {
            let mut h = vec![index.to_string()];
            h.extend((0..r.x.len()).map(|j| format!("x{j}")));
            h.extend((0..r.a.len()).map(|j| format!("a{j}")));
            h.extend((0..r.y.len()).map(|j| format!("y{j}")));
            wtr.write_record(&h)?;
            header_done = true;
        }
        let mut row = vec![i.to_string()];
        row.extend(r.stacked().iter().map(|v| format!("{v}")));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// How a branch obtains its noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisePolicy {
    /// Reuse the realised-world draws.
    #[default]
    CommonRandomNumbers,
    /// Independent draws from a different seed.
    FreshDraws { seed: u64 },
}

/// Counterfactual branch D_{t,0:H}(a_{t:t+s}).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub t: usize,
    pub intervention: Vec<Vec<f64>>,
    pub horizon: usize,
    pub records: Vec<DataRecord>,
    pub noise: NoisePolicy,
}

impl Branch {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_records(w, "h", self.records.iter().enumerate().map(|(h, r)| (h as i64, r)))
    }
}

pub fn simulate_trajectory(spec: &SystemSpec, seed: u64, replication: u64) -> Result<Trajectory> {
    let records = simulate_prefix(spec, seed, replication, spec.horizon)?;
    Ok(Trajectory {
        records,
        seed,
        replication,
    })
}

/// Replications `0..n` of the same system, in replication order.
pub fn simulate_many(spec: &SystemSpec, seed: u64, n: usize) -> Result<Vec<Trajectory>> {
    (0..n as u64)
        .into_par_iter()
        .map(|r| simulate_trajectory(spec, seed, r))
        .collect()
}

/// Records for t = 1..=upto.
fn simulate_prefix(spec: &SystemSpec, seed: u64, replication: u64, upto: usize) -> Result<Vec<DataRecord>> {
    let padding = spec.padding();
    let m = padding.len();
    let mut hist = padding;
    hist.reserve(upto);
    for t in 1..=upto {
        let noise = spec.noise.draw(seed, replication, t);
        let mut rec = step_with(spec, &hist, &noise, Overrides::default())?;
        rec.t = t as i64;
        hist.push(rec);
    }
    Ok(hist.split_off(m))
}

/// Assignment and feature settings for one branch period.
#[derive(Debug, Clone, Default)]
struct BranchStep<'a> {
    a: Option<&'a [f64]>,
    x: Option<&'a [f64]>,
}

/// Runs periods t..=t+H on top of `history` (which ends at t-1).
fn run_branch<'a, F>(
    spec: &SystemSpec,
    history: Vec<DataRecord>,
    t: usize,
    horizon: usize,
    mut step: impl FnMut(usize) -> BranchStep<'a>,
    mut noise: F,
) -> Result<Vec<DataRecord>>
where
    F: FnMut(usize) -> NoiseDraw,
{
    let mut hist = history;
    let start = hist.len();
    for h in 0..=horizon {
        let st = step(h);
        let e = noise(t + h);
        let mut rec = step_with(spec, &hist, &e, Overrides { x: st.x, a: st.a })?;
        rec.t = (t + h) as i64;
        hist.push(rec);
    }
    Ok(hist.split_off(start))
}

fn check_branch_args(spec: &SystemSpec, t: usize, horizon: usize, a_path: &[Vec<f64>]) -> Result<()> {
    if t == 0 || t > spec.horizon {
        return Err(Error::TimeOutOfRange {
            t,
            horizon: spec.horizon,
        });
    }
    if t + horizon > spec.horizon {
        return Err(Error::HorizonOverflow {
            t,
            h: horizon,
            horizon: spec.horizon,
        });
    }
    if a_path.is_empty() || a_path.len() > horizon + 1 {
        return Err(Error::InvalidArgument(format!(
            "intervention of length {} does not fit horizon {horizon}",
            a_path.len()
        )));
    }
    for a in a_path {
        if !spec.spaces.assignment_contains(a) {
            return Err(Error::Domain {
                component: "intervention".into(),
                value: a.clone(),
            });
        }
    }
    Ok(())
}

/// History D_{1-m:t-1} as seen by the realised world.
fn prefix_of(spec: &SystemSpec, traj: &Trajectory, t: usize) -> Vec<DataRecord> {
    let mut hist = spec.padding();
    hist.extend_from_slice(&traj.records[..t - 1]);
    hist
}

/// Branch from period t with assignments `a_path` = a_{t:t+s} held fixed for
/// h ≤ s and the SAM running on the branch history afterwards.
pub fn simulate_branch(
    spec: &SystemSpec,
    traj: &Trajectory,
    t: usize,
    a_path: &[Vec<f64>],
    horizon: usize,
    policy: NoisePolicy,
) -> Result<Branch> {
    check_branch_args(spec, t, horizon, a_path)?;
    if traj.records.len() < spec.horizon {
        return Err(Error::dim("trajectory length", spec.horizon, traj.records.len()));
    }
    let history = prefix_of(spec, traj, t);
    let (seed, rep) = match policy {
        NoisePolicy::CommonRandomNumbers => (traj.seed, traj.replication),
        NoisePolicy::FreshDraws { seed } => (seed, traj.replication),
    };
    let records = run_branch(
        spec,
        history,
        t,
        horizon,
        |h| BranchStep {
            a: a_path.get(h).map(|v| v.as_slice()),
            x: None,
        },
        |tt| spec.noise.draw(seed, rep, tt),
    )?;
    Ok(Branch {
        t,
        intervention: a_path.to_vec(),
        horizon,
        records,
        noise: policy,
    })
}

/// Y_{t,h}(a) − Y_{t,h}(a′) for h = 0..=H, with every future assignment held
/// at its realised value (the direct effect). Realised future assignments are
/// replayed from the trajectory.
pub fn direct_effect(
    spec: &SystemSpec,
    traj: &Trajectory,
    t: usize,
    horizon: usize,
    a: &[f64],
    a_alt: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let path = |first: &[f64]| -> Vec<Vec<f64>> {
        let mut p = vec![first.to_vec()];
        for h in 1..=horizon {
            if t + h <= traj.records.len() {
                p.push(traj.at(t + h).a.clone());
            }
        }
        p
    };
    let b1 = simulate_branch(spec, traj, t, &path(a), horizon, NoisePolicy::CommonRandomNumbers)?;
    let b0 = simulate_branch(spec, traj, t, &path(a_alt), horizon, NoisePolicy::CommonRandomNumbers)?;
    Ok(b1
        .records
        .iter()
        .zip(&b0.records)
        .map(|(r1, r0)| r1.y.iter().zip(&r0.y).map(|(p, q)| p - q).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimand {
    Ate,
    Cate,
    Fte,
    Cfte,
    Marginal,
}

/// Conditioning set of an oracle, realised by pinning: the conditioning
/// values are injected and only the remaining noise is redrawn. Pinning X_t
/// reproduces conditioning on X_t when U_t is independent of (V_t, W_t) and
/// X_t carries no information about the past beyond what is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Conditioning {
    #[default]
    None,
    OnFeature { x: Vec<f64> },
    /// History ending at t-1; at least `order` records, oldest first.
    OnHistory { history: Vec<DataRecord> },
    Both { x: Vec<f64>, history: Vec<DataRecord> },
}

impl Conditioning {
    fn estimand(&self) -> Estimand {
        match self {
            Conditioning::None => Estimand::Ate,
            Conditioning::OnFeature { .. } => Estimand::Cate,
            Conditioning::OnHistory { .. } => Estimand::Fte,
            Conditioning::Both { .. } => Estimand::Cfte,
        }
    }

    fn key(&self) -> Option<String> {
        match self {
            Conditioning::None => None,
            _ => serde_json::to_string(self).ok(),
        }
    }

    fn feature(&self) -> Option<&[f64]> {
        match self {
            Conditioning::OnFeature { x } | Conditioning::Both { x, .. } => Some(x),
            _ => None,
        }
    }

    fn history(&self) -> Option<&[DataRecord]> {
        match self {
            Conditioning::OnHistory { history } | Conditioning::Both { history, .. } => Some(history),
            _ => None,
        }
    }
}

/// Monte Carlo value of a dynamic causal effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSample {
    pub estimand: Estimand,
    pub horizon: usize,
    pub t: usize,
    pub contrast: (Vec<f64>, Vec<f64>),
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_reps: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conditioning_key: Option<String>,
}

/// Options shared by the oracle operations.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRequest {
    pub t: usize,
    pub h: usize,
    pub n_reps: usize,
    pub seed: u64,
    pub conditioning: Conditioning,
}

/// Paired outcomes of a set of branches from a shared draw of everything
/// except the assignment at t.
fn paired_outcomes(spec: &SystemSpec, req: &OracleRequest, rep: u64, assignments: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let t = req.t;
    let history = match req.conditioning.history() {
        Some(h) => {
            let m = spec.order();
            if h.len() < m {
                return Err(Error::ShortHistory { got: h.len(), need: m });
            }
            for r in h {
                if r.x.len() != spec.spaces.dx || r.a.len() != spec.spaces.da || r.y.len() != spec.spaces.dy {
                    return Err(Error::dim("conditioning history record", spec.spaces.state_dim(), r.stacked().len()));
                }
            }
            h.to_vec()
        }
        None => {
            let mut hist = spec.padding();
            hist.extend(simulate_prefix(spec, req.seed, rep, t - 1)?);
            hist
        }
    };
    let pinned_x = req.conditioning.feature();
    assignments
        .iter()
        .map(|a| {
            let recs = run_branch(
                spec,
                history.clone(),
                t,
                req.h,
                |h| BranchStep {
                    a: if h == 0 { Some(a.as_slice()) } else { None },
                    x: if h == 0 { pinned_x } else { None },
                },
                |tt| spec.noise.draw(req.seed, rep, tt),
            )?;
            Ok(recs[req.h].y.clone())
        })
        .collect()
}

fn check_request(spec: &SystemSpec, req: &OracleRequest) -> Result<()> {
    if req.n_reps < 2 {
        return Err(Error::InvalidArgument("oracle needs at least 2 replications".into()));
    }
    if req.t == 0 || req.t > spec.horizon {
        return Err(Error::TimeOutOfRange {
            t: req.t,
            horizon: spec.horizon,
        });
    }
    if req.t + req.h > spec.horizon {
        return Err(Error::HorizonOverflow {
            t: req.t,
            h: req.h,
            horizon: spec.horizon,
        });
    }
    if let Some(x) = req.conditioning.feature() {
        if x.len() != spec.spaces.dx {
            return Err(Error::dim("conditioning feature", spec.spaces.dx, x.len()));
        }
    }
    Ok(())
}

fn summarise(diffs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = diffs.first().map_or(0, |v| v.len());
    let n = diffs.len() as f64;
    let mut value = Vec::with_capacity(d);
    let mut se = Vec::with_capacity(d);
    for j in 0..d {
        let col: Vec<f64> = diffs.iter().map(|v| v[j]).collect();
        value.push(mean(&col));
        se.push(sample_sd(&col) / n.sqrt());
    }
    (value, se)
}

/// Monte Carlo oracle of E[Y_{t,h}(a) − Y_{t,h}(a′) | conditioning] with
/// paired branches under common random numbers. `estimand` must match the
/// conditioning (ATE ↔ none, CATE ↔ feature, FTE ↔ history, CFTE ↔ both).
pub fn oracle_effect(
    spec: &SystemSpec,
    estimand: Estimand,
    req: &OracleRequest,
    a: &[f64],
    a_alt: &[f64],
) -> Result<EffectSample> {
    check_request(spec, req)?;
    if estimand != req.conditioning.estimand() {
        return Err(Error::InvalidArgument(format!(
            "estimand {estimand:?} does not match the conditioning set"
        )));
    }
    for v in [a, a_alt] {
        if !spec.spaces.assignment_contains(v) {
            return Err(Error::Domain {
                component: "contrast".into(),
                value: v.to_vec(),
            });
        }
    }
    let pair = [a.to_vec(), a_alt.to_vec()];
    let diffs: Vec<Vec<f64>> = (0..req.n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let ys = paired_outcomes(spec, req, r, &pair)?;
            Ok(ys[0].iter().zip(&ys[1]).map(|(p, q)| p - q).collect())
        })
        .collect::<Result<_>>()?;
    let (value, stderr) = summarise(&diffs);
    Ok(EffectSample {
        estimand,
        horizon: req.h,
        t: req.t,
        contrast: (a.to_vec(), a_alt.to_vec()),
        value,
        stderr,
        n_reps: req.n_reps,
        seed: req.seed,
        conditioning_key: req.conditioning.key(),
    })
}

/// Default central-difference bump for coordinate value `a`.
pub fn default_bump(a: f64) -> f64 {
    1e-3 * (1.0 + a.abs())
}

/// Central finite-difference derivative of Y_{t,h}(a) in each assignment
/// coordinate, averaged over replications. The value stacks dY entries per
/// assignment coordinate.
pub fn marginal_effect(spec: &SystemSpec, req: &OracleRequest, a: &[f64], bump: Option<f64>) -> Result<EffectSample> {
    check_request(spec, req)?;
    if !matches!(
        spec.spaces.assignment,
        AssignmentDomain::Continuous { .. } | AssignmentDomain::Unbounded
    ) {
        return Err(Error::InvalidArgument("marginal effects need a continuous assignment".into()));
    }
    if a.len() != spec.spaces.da {
        return Err(Error::dim("assignment", spec.spaces.da, a.len()));
    }
    if let Some(d) = bump {
        if !(d > 0.0) {
            return Err(Error::InvalidArgument("bump must be positive".into()));
        }
    }
    let mut points = Vec::with_capacity(2 * a.len());
    let mut bumps = Vec::with_capacity(a.len());
    for j in 0..a.len() {
        let d = bump.unwrap_or_else(|| default_bump(a[j]));
        bumps.push(d);
        let mut up = a.to_vec();
        up[j] += d;
        let mut dn = a.to_vec();
        dn[j] -= d;
        points.push(up);
        points.push(dn);
    }
    let diffs: Vec<Vec<f64>> = (0..req.n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let ys = paired_outcomes(spec, req, r, &points)?;
            let mut out = Vec::new();
            for (j, d) in bumps.iter().enumerate() {
                out.extend(ys[2 * j].iter().zip(&ys[2 * j + 1]).map(|(p, q)| (p - q) / (2.0 * d)));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let (value, stderr) = summarise(&diffs);
    Ok(EffectSample {
        estimand: Estimand::Marginal,
        horizon: req.h,
        t: req.t,
        contrast: (a.to_vec(), a.to_vec()),
        value,
        stderr,
        n_reps: req.n_reps,
        seed: req.seed,
        conditioning_key: req.conditioning.key(),
    })
}

/// Outcome of a PS-exogeneity probe run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExogeneityReport {
    pub exogenous: bool,
    pub probes: usize,
    /// (t, h, coordinate) of the first probe that moved.
    pub first_failure: Option<(usize, usize, usize)>,
}

fn random_assignment<R: Rng>(spaces: &Spaces, rng: &mut R) -> Vec<f64> {
    match &spaces.assignment {
        AssignmentDomain::Binary => vec![if rng.random::<bool>() { 1.0 } else { 0.0 }],
        AssignmentDomain::FiniteAtoms { atoms } => atoms[rng.random_range(0..atoms.len())].clone(),
        AssignmentDomain::Continuous { lower, upper } => lower
            .iter()
            .zip(upper)
            .map(|(l, u)| l + (u - l) * rng.random::<f64>())
            .collect(),
        AssignmentDomain::Unbounded => (0..spaces.da).map(|_| rng.random_range(-3.0..3.0)).collect(),
    }
}

/// Checks whether the masked coordinates of Z = (X, Y) are invariant to the
/// time-t assignment over `n_probes` random probes (t, a, a′, seed), for all
/// h ≤ `max_h` (truncated at T).
pub fn check_ps_exogeneity(
    spec: &SystemSpec,
    mask: &[bool],
    n_probes: usize,
    max_h: usize,
    seed: u64,
) -> Result<ExogeneityReport> {
    let (dx, dy) = (spec.spaces.dx, spec.spaces.dy);
    if mask.len() != dx + dy {
        return Err(Error::dim("exogeneity mask", dx + dy, mask.len()));
    }
    for p in 0..n_probes as u64 {
        let mut rng = cell_rng(seed, p, 0, component::PROBE);
        let t = rng.random_range(1..=spec.horizon);
        let a = random_assignment(&spec.spaces, &mut rng);
        let mut b = random_assignment(&spec.spaces, &mut rng);
        if spec.spaces.atoms().is_some_and(|atoms| atoms.len() > 1) {
            while b == a {
                b = random_assignment(&spec.spaces, &mut rng);
            }
        }
        let probe_seed: u64 = rng.random();
        let h = max_h.min(spec.horizon - t);
        let traj = Trajectory {
            records: simulate_prefix(spec, probe_seed, 0, spec.horizon)?,
            seed: probe_seed,
            replication: 0,
        };
        let b1 = simulate_branch(spec, &traj, t, &[a], h, NoisePolicy::CommonRandomNumbers)?;
        let b0 = simulate_branch(spec, &traj, t, &[b], h, NoisePolicy::CommonRandomNumbers)?;
        for (hh, (r1, r0)) in b1.records.iter().zip(&b0.records).enumerate() {
            let z1: Vec<f64> = r1.x.iter().chain(&r1.y).cloned().collect();
            let z0: Vec<f64> = r0.x.iter().chain(&r0.y).cloned().collect();
            for (k, on) in mask.iter().enumerate() {
                if *on && z1[k] != z0[k] {
                    return Ok(ExogeneityReport {
                        exogenous: false,
                        probes: p as usize + 1,
                        first_failure: Some((t, hh, k)),
                    });
                }
            }
        }
    }
    Ok(ExogeneityReport {
        exogenous: true,
        probes: n_probes,
        first_failure: None,
    })
}
