//! Task execution. Every task returns its output files in memory plus one
//! summary line per result row; writing and hashing happen afterwards.

use std::sync::Arc;

use potsys::control::{deviation_effect, simulate_controlled, solve_backward, FinitePS};
use potsys::design::{fit_sam_sampler, invert_to_region, randomization_test, SamSampler, TestOptions};
use potsys::estimators::{
    aipw_ate, attenuation_check, clp_decomposition, clp_fit, diff_in_means, fit_cell_linear, iv_wald, kernel_mu,
    lp_fit, Coarsening, EffectEstimate, OutcomeModel, Panel, PanelOptions, PropensityKind, PropensityModel,
};
use potsys::linear::{assemble, irf};
use potsys::simulator::{
    marginal_effect, oracle_effect, simulate_many, simulate_trajectory, Estimand, OracleRequest, Trajectory,
};
use potsys::system::SystemSpec;
use serde::Serialize;

use crate::config::{
    CoarseningConfig, ControlTask, EstimateMethod, EstimateTask, InvertTask, OracleTask, OutcomeConfig,
    PropensityConfig, RandTestTask, Resolved, SamplerConfig, Task,
};
use crate::CliError;

pub struct Output {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Default)]
pub struct TaskOutput {
    pub files: Vec<Output>,
    pub summary: Vec<String>,
}

impl TaskOutput {
    fn file(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push(Output {
            name: name.into(),
            bytes,
        });
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        bytes.push(b'\n');
        self.file(name, bytes);
        Ok(())
    }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Minimal CSV assembly for flat numeric tables.
struct Table {
    text: String,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            text: format!("{}\n", header.join(",")),
        }
    }

    fn row(&mut self, cells: Vec<String>) {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

pub fn execute(r: &Resolved) -> Result<TaskOutput, CliError> {
    let spec = &r.spec;
    let seed = r.config.seed;
    match &r.config.task {
        Task::Simulate(t) => simulate(spec, seed, t.replications),
        Task::Irf(t) => irf_task(spec, t.horizon),
        Task::Oracle(t) => oracle(spec, seed, t),
        Task::Estimate(t) => estimate(spec, seed, t),
        Task::Randtest(t) => randtest(spec, seed, r.observed.as_ref(), t),
        Task::Invert(t) => invert(spec, seed, r.observed.as_ref(), t),
        Task::Control(t) => control(spec, seed, t),
    }
}

fn simulate(spec: &SystemSpec, seed: u64, replications: usize) -> Result<TaskOutput, CliError> {
    let mut out = TaskOutput::default();
    for traj in simulate_many(spec, seed, replications)? {
        let mut csv = Vec::new();
        traj.write_csv(&mut csv)?;
        let rep = traj.replication;
        out.file(format!("trajectory_r{rep}.csv"), csv);
        out.json(&format!("trajectory_r{rep}.json"), &traj)?;
        let y = traj.y0();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        out.summary
            .push(format!("simulate replication={rep} T={} mean_y0={mean}", traj.len()));
    }
    Ok(out)
}

fn irf_task(spec: &SystemSpec, horizon: usize) -> Result<TaskOutput, CliError> {
    let ls = spec
        .sem
        .as_linear()
        .ok_or_else(|| CliError::Validation("irf needs a linear system".into()))?;
    let lr = assemble(ls)?;
    let table = irf(&lr, horizon);
    let mut out = TaskOutput::default();
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    out.file("irf.csv", csv);
    out.json("irf.json", &table)?;
    for h in 0..=horizon {
        let m = table.outcome_psi(h);
        let flat: Vec<f64> = (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| (i, j))).map(|ij| m[ij]).collect();
        out.summary.push(format!("irf h={h} psi_y={}", fmt_vec(&flat)));
    }
    Ok(out)
}

fn oracle(spec: &SystemSpec, seed: u64, t: &OracleTask) -> Result<TaskOutput, CliError> {
    let mut out = TaskOutput::default();
    let mut csv = Table::new(&["estimand", "t", "h", "coord", "value", "stderr", "n_reps"]);
    let mut samples = Vec::new();
    for &h in &t.horizons {
        let req = OracleRequest {
            t: t.t,
            h,
            n_reps: t.n_reps,
            seed,
            conditioning: t.conditioning.clone(),
        };
        let s = if t.estimand == Estimand::Marginal {
            marginal_effect(spec, &req, &t.a, t.bump)?
        } else {
            let alt = t.a_alt.as_ref().expect("checked at validation");
            oracle_effect(spec, t.estimand, &req, &t.a, alt)?
        };
        let name = serde_json::to_value(s.estimand)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        for (k, (v, se)) in s.value.iter().zip(&s.stderr).enumerate() {
            csv.row(vec![
                name.clone(),
                t.t.to_string(),
                h.to_string(),
                k.to_string(),
                v.to_string(),
                se.to_string(),
                s.n_reps.to_string(),
            ]);
            out.summary.push(format!("oracle {name} t={} h={h} coord={k} value={v} stderr={se}", t.t));
        }
        samples.push(s);
    }
    out.file("oracle.csv", csv.into_bytes());
    out.json("oracle.json", &samples)?;
    Ok(out)
}

struct EstRow {
    term: String,
    point: f64,
    stderr: Option<f64>,
    n_obs: usize,
}

fn effect_row(term: &str, e: &EffectEstimate) -> EstRow {
    EstRow {
        term: term.into(),
        point: e.point,
        stderr: Some(e.stderr),
        n_obs: e.n_obs,
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::Runtime(e.to_string()))
}

fn propensity(spec: &SystemSpec, panel: &Panel, cfg: &PropensityConfig, clip: Option<f64>) -> Result<PropensityModel, CliError> {
    let atoms = spec.spaces.atoms().unwrap_or_else(|| panel.assignment_atoms());
    let model = match cfg {
        PropensityConfig::Known => PropensityModel::new(PropensityKind::KnownFromSpec(Arc::new(spec.clone())), atoms),
        PropensityConfig::Constant { probs } => PropensityModel::new(PropensityKind::Constant(probs.clone()), atoms),
        PropensityConfig::Empirical => PropensityModel::empirical(panel, atoms)?,
        PropensityConfig::Logistic { history } => PropensityModel::logistic(panel, atoms, *history)?,
    };
    Ok(match clip {
        Some(c) => model.with_clip(c),
        None => model,
    })
}

fn estimate_at(
    spec: &SystemSpec,
    seed: u64,
    panel: Option<&Panel>,
    method: &EstimateMethod,
    h: usize,
) -> Result<(Vec<EstRow>, serde_json::Value), CliError> {
    let panel = || panel.ok_or_else(|| CliError::Runtime("missing panel".into()));
    Ok(match method {
        EstimateMethod::DiffInMeans { a, a_alt } => {
            let e = diff_in_means(panel()?, h, a, a_alt)?;
            (vec![effect_row("effect", &e)], to_value(&e)?)
        }
        EstimateMethod::Lp { .. } => {
            let fit = lp_fit(panel()?, h, &method.lp_options().expect("lp method"))?;
            let rows = fit
                .beta
                .iter()
                .zip(&fit.stderr)
                .enumerate()
                .map(|(j, (b, s))| EstRow {
                    term: format!("beta{j}"),
                    point: *b,
                    stderr: Some(*s),
                    n_obs: fit.n_obs,
                })
                .collect();
            (rows, to_value(&fit)?)
        }
        EstimateMethod::Clp { a, a_alt, x } => {
            let p = panel()?;
            let f1 = clp_fit(p, h, a)?;
            let f0 = clp_fit(p, h, a_alt)?;
            let (lhs, _) = clp_decomposition(&f1, &f0, x);
            let n = f1.n + f0.n;
            let rows = vec![
                EstRow {
                    term: "effect".into(),
                    point: lhs,
                    stderr: None,
                    n_obs: n,
                },
                EstRow {
                    term: "kappa_a".into(),
                    point: f1.kappa,
                    stderr: None,
                    n_obs: f1.n,
                },
                EstRow {
                    term: "kappa_a_alt".into(),
                    point: f0.kappa,
                    stderr: None,
                    n_obs: f0.n,
                },
            ];
            (rows, serde_json::json!({ "fit_a": f1, "fit_a_alt": f0, "x": x, "effect": lhs }))
        }
        EstimateMethod::Kernel { a, a_alt, options } => {
            let p = panel()?;
            let e = kernel_mu(p, h, options)?.plug_in_ate(p, a, a_alt)?;
            (vec![effect_row("effect", &e)], to_value(&e)?)
        }
        EstimateMethod::Iv { coarsening, floor } => {
            let c = match coarsening {
                CoarseningConfig::LastAssignmentAndOutcomeSign => Coarsening::LastAssignmentAndOutcomeSign,
                CoarseningConfig::None => Coarsening::None,
            };
            let e = iv_wald(panel()?, h, &c, *floor)?;
            let row = EstRow {
                term: "late".into(),
                point: e.point,
                stderr: Some(e.stderr),
                n_obs: e.n_obs,
            };
            (vec![row], to_value(&e)?)
        }
        EstimateMethod::Aipw {
            a,
            a_alt,
            propensity: pc,
            outcome,
            clip,
        } => {
            let p = panel()?;
            let prop = propensity(spec, p, pc, *clip)?;
            let mu = match outcome {
                OutcomeConfig::CellLinear { history, ipw_weighted } => {
                    fit_cell_linear(p, h, &prop.atoms, *history, ipw_weighted.then_some(&prop))?
                }
                OutcomeConfig::Kernel { options } => OutcomeModel::Kernel(kernel_mu(p, h, options)?),
                OutcomeConfig::Zero => OutcomeModel::Zero,
            };
            let e = aipw_ate(p, h, a, a_alt, &mu, &prop)?;
            let rows = vec![
                effect_row("ate", &e.estimate),
                EstRow {
                    term: "plug_in".into(),
                    point: e.plug_in,
                    stderr: None,
                    n_obs: e.estimate.n_obs,
                },
            ];
            (rows, to_value(&e)?)
        }
        EstimateMethod::Attenuation => {
            let rep = attenuation_check(spec, h, seed)?;
            let rows = vec![
                EstRow {
                    term: "ratio".into(),
                    point: rep.ratio,
                    stderr: Some(rep.stderr),
                    n_obs: rep.n_obs,
                },
                EstRow {
                    term: "factor".into(),
                    point: rep.factor,
                    stderr: None,
                    n_obs: rep.n_obs,
                },
            ];
            (rows, to_value(&rep)?)
        }
    })
}

fn estimate(spec: &SystemSpec, seed: u64, t: &EstimateTask) -> Result<TaskOutput, CliError> {
    let max_h = *t.horizons.iter().max().expect("checked at validation");
    let panel = if matches!(t.method, EstimateMethod::Attenuation) {
        None
    } else {
        let trajs = simulate_many(spec, seed, t.replications)?;
        Some(Panel::from_trajectories(
            &trajs,
            PanelOptions {
                max_h,
                history_lags: t.history_lags,
                outcome: t.outcome,
            },
        )?)
    };
    let name = t.method.name();
    let mut out = TaskOutput::default();
    let mut csv = Table::new(&["method", "h", "term", "point", "stderr", "n_obs"]);
    let mut details = Vec::new();
    for &h in &t.horizons {
        let (rows, detail) = estimate_at(spec, seed, panel.as_ref(), &t.method, h)?;
        for r in rows {
            out.summary.push(format!(
                "estimate {name} h={h} {}={} stderr={}",
                r.term,
                r.point,
                opt(r.stderr)
            ));
            csv.row(vec![
                name.into(),
                h.to_string(),
                r.term,
                r.point.to_string(),
                opt(r.stderr),
                r.n_obs.to_string(),
            ]);
        }
        details.push(serde_json::json!({ "h": h, "result": detail }));
    }
    out.file("estimate.csv", csv.into_bytes());
    out.json(
        "estimate.json",
        &serde_json::json!({
            "method": name,
            "dropped_rows": panel.as_ref().map(|p| p.dropped),
            "results": details,
        }),
    )?;
    Ok(out)
}

fn sampler(spec: &SystemSpec, observed: &Trajectory, cfg: &SamplerConfig) -> Result<SamSampler, CliError> {
    Ok(match cfg {
        SamplerConfig::Known => SamSampler::Known(Arc::new(spec.clone())),
        SamplerConfig::Fit { family, atoms } => {
            let atoms = match atoms.clone().or_else(|| spec.spaces.atoms()) {
                Some(a) => a,
                None => return Err(CliError::Validation("fitting a sampler needs assignment atoms".into())),
            };
            fit_sam_sampler(std::slice::from_ref(observed), *family, &atoms)?
        }
        SamplerConfig::Iid { atoms, probs } => SamSampler::IidEmpirical {
            atoms: atoms.clone(),
            probs: probs.clone(),
        },
    })
}

fn observed_or_simulated(spec: &SystemSpec, seed: u64, observed: Option<&Trajectory>) -> Result<Trajectory, CliError> {
    match observed {
        Some(t) => Ok(t.clone()),
        None => Ok(simulate_trajectory(spec, seed, 0)?),
    }
}

fn randtest(spec: &SystemSpec, seed: u64, observed: Option<&Trajectory>, t: &RandTestTask) -> Result<TaskOutput, CliError> {
    let obs = observed_or_simulated(spec, seed, observed)?;
    let s = sampler(spec, &obs, &t.sampler)?;
    let opts = TestOptions {
        draws: t.draws,
        alpha: t.alpha,
        seed,
    };
    let res = randomization_test(&obs, &s, &t.null, &t.statistic, &opts)?;
    let mut out = TaskOutput::default();
    let mut csv = Table::new(&["component", "observed", "p_value", "reject", "q_lo", "q_hi", "draws", "retries"]);
    let (lo, hi) = match res.quantiles {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    for (k, v) in res.observed.iter().enumerate() {
        csv.row(vec![
            k.to_string(),
            v.to_string(),
            res.p_value.to_string(),
            res.reject.to_string(),
            opt(lo),
            opt(hi),
            res.b.to_string(),
            res.retries.to_string(),
        ]);
        out.summary.push(format!(
            "randtest component={k} observed={v} p_value={} reject={} B={}",
            res.p_value, res.reject, res.b
        ));
    }
    out.file("randtest.csv", csv.into_bytes());
    out.json("randtest.json", &res)?;
    if t.write_draws {
        let mut d = Vec::new();
        res.write_draws_csv(&mut d)?;
        out.file("draws.csv", d);
    }
    Ok(out)
}

fn invert(spec: &SystemSpec, seed: u64, observed: Option<&Trajectory>, t: &InvertTask) -> Result<TaskOutput, CliError> {
    let obs = observed_or_simulated(spec, seed, observed)?;
    let s = sampler(spec, &obs, &t.sampler)?;
    let opts = TestOptions {
        draws: t.draws,
        alpha: t.alpha,
        seed,
    };
    let region = invert_to_region(&obs, &s, &t.family, &t.grid.points(), &t.statistic, &opts)?;
    let mut out = TaskOutput::default();
    for p in &region.points {
        out.summary.push(format!(
            "invert theta={} p_value={} accepted={}",
            fmt_vec(&p.theta),
            p.p_value,
            p.accepted
        ));
    }
    let mut csv = Vec::new();
    region.write_csv(&mut csv)?;
    out.file("region.csv", csv);
    out.json("region.json", &region)?;
    Ok(out)
}

fn control(spec: &SystemSpec, seed: u64, t: &ControlTask) -> Result<TaskOutput, CliError> {
    let mut fps = FinitePS::new(spec.clone())?;
    if let Some(cap) = t.state_cap {
        fps = fps.with_state_cap(cap);
    }
    let policy = solve_backward(&fps, &t.loss)?;
    let residual = policy.bellman_residual(&t.loss)?;
    let mut out = TaskOutput::default();
    let mut csv = Vec::new();
    policy.write_csv(&mut csv)?;
    out.file("policy.csv", csv);
    out.json(
        "control.json",
        &serde_json::json!({
            "horizon": policy.horizon,
            "initial_value": policy.initial_value(),
            "initial_action": policy.atoms[policy.action[0][0]],
            "n_states": policy.n_states(),
            "bellman_residual": residual,
            "tie_break": policy.tie_break,
            "atoms": policy.atoms,
        }),
    )?;
    out.summary.push(format!(
        "control T={} value={} initial_action={} states={} bellman_residual={residual}",
        policy.horizon,
        policy.initial_value(),
        fmt_vec(&policy.atoms[policy.action[0][0]]),
        policy.n_states()
    ));
    if t.deviations {
        let mut dev = Table::new(&["t", "state", "action", "policy_action", "regret", "h", "contrast"]);
        for stage in 1..=policy.horizon {
            for s in 0..policy.states[stage - 1].len() {
                for a in &policy.atoms {
                    let d = deviation_effect(&policy, stage, s, a)?;
                    for (h, c) in d.contrast.iter().enumerate() {
                        dev.row(vec![
                            stage.to_string(),
                            s.to_string(),
                            fmt_vec(a).replace(',', " "),
                            fmt_vec(&d.policy_action).replace(',', " "),
                            d.regret.to_string(),
                            h.to_string(),
                            c[0].to_string(),
                        ]);
                    }
                }
            }
        }
        out.file("deviations.csv", dev.into_bytes());
    }
    for rep in 0..t.replications as u64 {
        let traj = simulate_controlled(&fps, &policy, seed, rep)?;
        let mut csv = Vec::new();
        traj.write_csv(&mut csv)?;
        out.file(format!("controlled_r{rep}.csv"), csv);
        out.summary.push(format!(
            "control replication={rep} actions={}",
            fmt_vec(&traj.a0())
        ));
    }
    Ok(out)
}
