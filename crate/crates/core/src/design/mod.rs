//! Design-based randomization inference: resample assignment paths from the
//! assignment mechanism, impute outcomes under a homogeneous linear causal
//! null, and calibrate a test statistic against the resampled draws.

mod null;
mod sampler;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use null::{GRecursion, NullFamily, NullSpec};
pub use sampler::{fit_sam_sampler, LogisticSam, SamFamily, SamSampler};

use crate::error::{Error, Result};
use crate::linalg::{median, quantile_sorted, rowmajor};
use crate::simulator::{check_ps_exogeneity, Trajectory};
use crate::system::DataRecord;

/// Declared, untestable premise attached to every test result.
pub const DECLARED_ASSUMPTION: &str = "imputed potential outcomes Y_t(A*_{1:t-1}, a) are independent of A*_t given \
(A*_{1:t-1}, X_{1:t}, Y*_{1:t-1}); features are PS-exogenous";

/// Replicates whose statistic hits an empty cell are redrawn at most this
/// many times.
pub const MAX_RETRIES: usize = 100;

/// One draw A*_{1:T} with outcomes imputed under the null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampledPath {
    pub b: u64,
    pub x: Vec<Vec<f64>>,
    pub a_star: Vec<Vec<f64>>,
    pub y_star: Vec<Vec<f64>>,
}

impl ResampledPath {
    /// The observed path itself (A* = A, Y* = Y).
    pub fn observed(traj: &Trajectory) -> Self {
        ResampledPath {
            b: u64::MAX,
            x: traj.records.iter().map(|r| r.x.clone()).collect(),
            a_star: traj.records.iter().map(|r| r.a.clone()).collect(),
            y_star: traj.records.iter().map(|r| r.y.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.a_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_star.is_empty()
    }

    fn record(&self, i: usize) -> DataRecord {
        DataRecord {
            t: i as i64 + 1,
            x: self.x[i].clone(),
            a: self.a_star[i].clone(),
            y: self.y_star[i].clone(),
        }
    }

    /// History window of `order` records before period t (1-based), with the
    /// sampler's padding before period 1.
    pub fn window(&self, sampler: &SamSampler, t: usize) -> Vec<DataRecord> {
        let m = sampler.order();
        let mut out = Vec::with_capacity(m);
        if t <= m {
            let pad = sampler.padding(&self.record(0));
            out.extend(pad[pad.len() + t - 1 - m..].iter().cloned());
        }
        for i in t.saturating_sub(m + 1)..t - 1 {
            out.push(self.record(i));
        }
        out
    }
}

/// Draws A*_{1:T} recursively from the sampler on the imputed history and
/// imputes Y*_t = Y_t + g_t(A*_{1:t}, A_{1:t}; θ). `stream` selects the
/// counter stream (the replicate index).
pub fn resample_assignments(
    observed: &Trajectory,
    sampler: &SamSampler,
    null: &NullSpec,
    seed: u64,
    stream: u64,
) -> Result<ResampledPath> {
    null.validate()?;
    let recs = &observed.records;
    if recs.is_empty() {
        return Err(Error::InvalidArgument("empty observed trajectory".into()));
    }
    let (dy, da) = null.dims();
    if recs[0].y.len() != dy || recs[0].a.len() != da {
        return Err(Error::dim("null dimensions", dy * da, recs[0].y.len() * recs[0].a.len()));
    }
    let m = sampler.order();
    let mut hist = sampler.padding(&recs[0]);
    hist.reserve(recs.len());
    let mut g = GRecursion::new(null);
    let sharp = null.is_zero() && null.vartheta.iter().all(|m| m.iter().all(|v| *v == 0.0));
    let mut path = ResampledPath {
        b: stream,
        x: Vec::with_capacity(recs.len()),
        a_star: Vec::with_capacity(recs.len()),
        y_star: Vec::with_capacity(recs.len()),
    };
    for (i, r) in recs.iter().enumerate() {
        let window = &hist[hist.len() - m..];
        let a = sampler.draw(window, &r.x, seed, stream, i + 1)?;
        if a.len() != da {
            return Err(Error::dim("resampled assignment", da, a.len()));
        }
        let y: Vec<f64> = if sharp {
            r.y.clone()
        } else {
            let gt = g.push(&a, &r.a)?;
            r.y.iter().zip(gt.iter()).map(|(y, g)| y + g).collect()
        };
        hist.push(DataRecord {
            t: r.t,
            x: r.x.clone(),
            a: a.clone(),
            y: y.clone(),
        });
        path.x.push(r.x.clone());
        path.a_star.push(a);
        path.y_star.push(y);
    }
    Ok(path)
}

/// Single-period inverse-probability statistic
/// `1(A*_t=1) Y*_t / p − 1(A*_t=0) Y*_t / (1 − p)` on outcome coordinate 0.
pub fn ipw_statistic(path: &ResampledPath, t: usize, p_star: f64) -> Result<f64> {
    if t == 0 || t > path.len() {
        return Err(Error::TimeOutOfRange {
            t,
            horizon: path.len(),
        });
    }
    if !(p_star > 0.0 && p_star < 1.0) {
        return Err(Error::Positivity(p_star));
    }
    let a = &path.a_star[t - 1];
    let y = path.y_star[t - 1][0];
    match a.as_slice() {
        [v] if *v == 1.0 => Ok(y / p_star),
        [v] if *v == 0.0 => Ok(-y / (1.0 - p_star)),
        _ => Err(Error::Domain {
            component: "ipw statistic assignment".into(),
            value: a.clone(),
        }),
    }
}

/// Difference in means of Y*_{t+h} between A*_t = 1 and A*_t = 0 for
/// h = 0..H over t = 1..T−H, premultiplied by W.
pub fn weighted_horizon_statistic(path: &ResampledPath, w: &DMatrix<f64>, horizon: usize, outcome: usize) -> Result<Vec<f64>> {
    if w.ncols() != horizon + 1 {
        return Err(Error::dim("weight matrix columns", horizon + 1, w.ncols()));
    }
    let n = path.len();
    if n <= horizon {
        return Err(Error::HorizonOverflow {
            t: 1,
            h: horizon,
            horizon: n,
        });
    }
    let mut s1 = vec![0.0; horizon + 1];
    let mut s0 = vec![0.0; horizon + 1];
    let (mut n1, mut n0) = (0usize, 0usize);
    for i in 0..n - horizon {
        let a = path.a_star[i][0];
        let (s, c) = if a == 1.0 {
            (&mut s1, &mut n1)
        } else if a == 0.0 {
            (&mut s0, &mut n0)
        } else {
            return Err(Error::Domain {
                component: "binary assignment".into(),
                value: path.a_star[i].clone(),
            });
        };
        *c += 1;
        for (h, acc) in s.iter_mut().enumerate() {
            *acc += path.y_star[i + h][outcome];
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::EmptyCell("a resampled assignment cell is empty".into()));
    }
    let diff = DVector::from_iterator(horizon + 1, (0..=horizon).map(|h| s1[h] / n1 as f64 - s0[h] / n0 as f64));
    Ok((w * diff).iter().cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatisticSpec {
    WeightedHorizonDiff {
        #[serde(with = "rowmajor")]
        weights: DMatrix<f64>,
        horizon: usize,
        #[serde(default)]
        outcome: usize,
    },
    /// IPW statistic at period `t`, or averaged over all periods when `t` is
    /// absent. Without `p_star` the sampler's conditional law supplies p*_t.
    Ipw {
        #[serde(default)]
        p_star: Option<f64>,
        #[serde(default)]
        t: Option<usize>,
    },
}

impl StatisticSpec {
    /// Horizon-0 difference in means.
    pub fn diff_in_means() -> Self {
        StatisticSpec::WeightedHorizonDiff {
            weights: DMatrix::from_element(1, 1, 1.0),
            horizon: 0,
            outcome: 0,
        }
    }

    /// Evaluates the statistic on a path; the sampler supplies p*_t when
    /// needed.
    pub fn evaluate(&self, path: &ResampledPath, sampler: &SamSampler) -> Result<Vec<f64>> {
        match self {
            StatisticSpec::WeightedHorizonDiff { weights, horizon, outcome } => {
                weighted_horizon_statistic(path, weights, *horizon, *outcome)
            }
            StatisticSpec::Ipw { p_star, t } => {
                let p_at = |t: usize| -> Result<f64> {
                    match p_star {
                        Some(p) => Ok(*p),
                        None => {
                            let law = sampler
                                .law(&path.window(sampler, t), &path.x[t - 1])?
                                .ok_or_else(|| Error::InvalidArgument("sampler has no closed-form law; set p_star".into()))?;
                            let atoms = sampler.atoms().unwrap_or_default();
                            let k = atoms
                                .iter()
                                .position(|a| a.as_slice() == [1.0])
                                .ok_or_else(|| Error::UnobservedAtom("[1.0]".into()))?;
                            Ok(law[k])
                        }
                    }
                };
                match t {
                    Some(t) => Ok(vec![ipw_statistic(path, *t, p_at(*t)?)?]),
                    None => {
                        let n = path.len();
                        let mut s = 0.0;
                        for t in 1..=n {
                            s += ipw_statistic(path, t, p_at(t)?)?;
                        }
                        Ok(vec![s / n as f64])
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    /// Number of null draws B.
    pub draws: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl TestOptions {
    fn check(&self) -> Result<()> {
        if self.draws < 100 {
            return Err(Error::InvalidArgument(format!("B = {} is below 100", self.draws)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub observed: Vec<f64>,
    pub draws: Vec<Vec<f64>>,
    /// T̂ − T*_b, scalar statistics only.
    pub l_star: Option<Vec<f64>>,
    /// (Q_{L*}(α/2), Q_{L*}(1 − α/2)), scalar statistics only.
    pub quantiles: Option<(f64, f64)>,
    pub p_value: f64,
    pub reject: bool,
    pub rule: String,
    pub alpha: f64,
    pub b: usize,
    pub seed: u64,
    pub null: NullSpec,
    /// Replicates redrawn after an empty assignment cell.
    pub retries: usize,
    pub assumption: String,
}

impl TestResult {
    /// CSV of the null draws: b, component, t_star, l_star.
    pub fn write_draws_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["b", "component", "t_star", "l_star"])?;
        for (b, d) in self.draws.iter().enumerate() {
            for (k, v) in d.iter().enumerate() {
                let l = self.observed[k] - v;
                wtr.write_record([b.to_string(), k.to_string(), v.to_string(), l.to_string()])?;
            }
        }
        wtr.flush().map_err(|e| Error::Io(e.to_string()))?;
        Ok(())
    }
}

fn check_exogenous_features(sampler: &SamSampler, seed: u64) -> Result<()> {
    if let SamSampler::Known(spec) = sampler {
        let (dx, dy) = (spec.spaces.dx, spec.spaces.dy);
        if dx > 0 {
            let mask: Vec<bool> = (0..dx + dy).map(|k| k < dx).collect();
            let rep = check_ps_exogeneity(spec, &mask, 20, 5.min(spec.horizon), seed)?;
            if !rep.exogenous {
                return Err(Error::InvalidSystem(format!(
                    "features are not PS-exogenous (first failure {:?})",
                    rep.first_failure
                )));
            }
        }
    }
    Ok(())
}

fn null_draw(
    observed: &Trajectory,
    sampler: &SamSampler,
    null: &NullSpec,
    statistic: &StatisticSpec,
    seed: u64,
    b: u64,
) -> Result<(Vec<f64>, usize)> {
    for retry in 0..=MAX_RETRIES {
        let stream = b | ((retry as u64) << 40);
        let path = resample_assignments(observed, sampler, null, seed, stream)?;
        match statistic.evaluate(&path, sampler) {
            Ok(v) => return Ok((v, retry)),
            Err(Error::EmptyCell(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::EmptyCell(format!("replicate {b} stayed empty after {MAX_RETRIES} redraws")))
}

/// Randomization test of the null at the parameter carried by `null`.
///
/// Scalar statistics reject when 0 ∉ [Q_{L*}(α/2), Q_{L*}(1 − α/2)] with
/// L*_b = T̂ − T*_b (type-7 quantiles); the reported p-value is
/// (1 + #{|T*_b − med| ≥ |T̂ − med|}) / (B + 1) with med = median(T*).
/// Vector statistics are studentized componentwise by the null MAD and
/// reduced to the max-abs deviation; they reject when p ≤ α.
pub fn randomization_test(
    observed: &Trajectory,
    sampler: &SamSampler,
    null: &NullSpec,
    statistic: &StatisticSpec,
    opts: &TestOptions,
) -> Result<TestResult> {
    opts.check()?;
    check_exogenous_features(sampler, opts.seed)?;
    let t_hat = statistic.evaluate(&ResampledPath::observed(observed), sampler)?;
    let out: Vec<(Vec<f64>, usize)> = (0..opts.draws as u64)
        .into_par_iter()
        .map(|b| null_draw(observed, sampler, null, statistic, opts.seed, b))
        .collect::<Result<_>>()?;
    let retries = out.iter().map(|(_, r)| r).sum();
    let draws: Vec<Vec<f64>> = out.into_iter().map(|(v, _)| v).collect();
    let bf = opts.draws as f64;
    let result = if t_hat.len() == 1 {
        let th = t_hat[0];
        let mut l: Vec<f64> = draws.iter().map(|d| th - d[0]).collect();
        let l_star = l.clone();
        l.sort_by(|a, b| a.total_cmp(b));
        let lo = quantile_sorted(&l, opts.alpha / 2.0);
        let hi = quantile_sorted(&l, 1.0 - opts.alpha / 2.0);
        let med = median(&draws.iter().map(|d| d[0]).collect::<Vec<_>>());
        let dev = (th - med).abs();
        let count = draws.iter().filter(|d| (d[0] - med).abs() >= dev).count();
        TestResult {
            observed: t_hat,
            l_star: Some(l_star),
            quantiles: Some((lo, hi)),
            p_value: (1.0 + count as f64) / (bf + 1.0),
            reject: !(lo <= 0.0 && 0.0 <= hi),
            rule: "quantile_bracket".into(),
            draws,
            alpha: opts.alpha,
            b: opts.draws,
            seed: opts.seed,
            null: null.clone(),
            retries,
            assumption: DECLARED_ASSUMPTION.into(),
        }
    } else {
        let k = t_hat.len();
        let med: Vec<f64> = (0..k).map(|j| median(&draws.iter().map(|d| d[j]).collect::<Vec<_>>())).collect();
        let mad: Vec<f64> = (0..k)
            .map(|j| {
                let s = median(&draws.iter().map(|d| (d[j] - med[j]).abs()).collect::<Vec<_>>());
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        let stat = |v: &[f64]| (0..k).map(|j| (v[j] - med[j]).abs() / mad[j]).fold(0.0, f64::max);
        let s_hat = stat(&t_hat);
        let count = draws.iter().filter(|d| stat(d) >= s_hat).count();
        let p = (1.0 + count as f64) / (bf + 1.0);
        TestResult {
            observed: t_hat,
            l_star: None,
            quantiles: None,
            p_value: p,
            reject: p <= opts.alpha,
            rule: "max_abs_mad_studentized".into(),
            draws,
            alpha: opts.alpha,
            b: opts.draws,
            seed: opts.seed,
            null: null.clone(),
            retries,
            assumption: DECLARED_ASSUMPTION.into(),
        }
    };
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionPoint {
    pub theta: Vec<f64>,
    pub accepted: bool,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRegion {
    pub family: NullFamily,
    pub points: Vec<RegionPoint>,
    pub alpha: f64,
    pub b: usize,
    pub seed: u64,
}

impl ConfidenceRegion {
    pub fn accepted(&self) -> Vec<Vec<f64>> {
        self.points.iter().filter(|p| p.accepted).map(|p| p.theta.clone()).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.points.iter().any(|p| p.accepted && p.theta == theta)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let k = self.points.first().map_or(0, |p| p.theta.len());
        let mut header: Vec<String> = (0..k).map(|j| format!("theta{j}")).collect();
        header.extend(["accepted".to_string(), "p_value".to_string()]);
        wtr.write_record(&header)?;
        for p in &self.points {
            let mut row: Vec<String> = p.theta.iter().map(|v| v.to_string()).collect();
            row.push(p.accepted.to_string());
            row.push(p.p_value.to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::Io(e.to_string()))?;
        Ok(())
    }
}

/// Test inversion over a finite grid. Every grid point uses the same seed,
/// so the resampled assignment uniforms are shared across θ.
pub fn invert_to_region(
    observed: &Trajectory,
    sampler: &SamSampler,
    family: &NullFamily,
    grid: &[Vec<f64>],
    statistic: &StatisticSpec,
    opts: &TestOptions,
) -> Result<ConfidenceRegion> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty theta grid".into()));
    }
    let points = grid
        .par_iter()
        .map(|theta| {
            let null = family.at(theta)?;
            let r = randomization_test(observed, sampler, &null, statistic, opts)?;
            Ok(RegionPoint {
                theta: theta.clone(),
                accepted: !r.reject,
                p_value: r.p_value,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConfidenceRegion {
        family: *family,
        points,
        alpha: opts.alpha,
        b: opts.draws,
        seed: opts.seed,
    })
}
