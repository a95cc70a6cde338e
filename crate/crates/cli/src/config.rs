//! Scenario config schema and its parse/validation stages.

use std::path::{Path, PathBuf};

use potsys::control::LossSpec;
use potsys::design::{NullFamily, NullSpec, SamFamily, StatisticSpec};
use potsys::estimators::{KernelOptions, LpOptions};
use potsys::linear::LinearStructural;
use potsys::simulator::{Conditioning, Estimand, Trajectory};
use potsys::system::{validate_system, AssignmentDomain, Distribution, NoiseModel, SemModel, Spaces, SystemSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const TASK_NAMES: [&str; 7] = ["simulate", "irf", "oracle", "estimate", "randtest", "invert", "control"];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub system: SystemSource,
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the working directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSource {
    /// A bundled system, optionally at another horizon.
    Scenario {
        name: String,
        #[serde(default)]
        horizon: Option<usize>,
    },
    /// A full system description inline.
    Spec(Box<SystemSpec>),
    /// A system description in a JSON file, relative to the config.
    File { path: PathBuf },
    /// Linear structural matrices; noise defaults to independent standard
    /// normals in every block and the assignment is unbounded.
    Linear {
        structural: Box<LinearStructural>,
        horizon: usize,
        #[serde(default)]
        noise: Option<Box<NoiseModel>>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Simulate(SimulateTask),
    Irf(IrfTask),
    Oracle(OracleTask),
    Estimate(EstimateTask),
    Randtest(RandTestTask),
    Invert(InvertTask),
    Control(ControlTask),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Simulate(_) => "simulate",
            Task::Irf(_) => "irf",
            Task::Oracle(_) => "oracle",
            Task::Estimate(_) => "estimate",
            Task::Randtest(_) => "randtest",
            Task::Invert(_) => "invert",
            Task::Control(_) => "control",
        }
    }
}

fn one() -> usize {
    1
}

fn default_alpha() -> f64 {
    0.05
}

fn default_floor() -> f64 {
    potsys::estimators::DEFAULT_RELEVANCE_FLOOR
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateTask {
    #[serde(default = "one")]
    pub replications: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrfTask {
    pub horizon: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleTask {
    pub estimand: Estimand,
    pub t: usize,
    pub horizons: Vec<usize>,
    pub n_reps: usize,
    pub a: Vec<f64>,
    /// Required except for marginal effects.
    #[serde(default)]
    pub a_alt: Option<Vec<f64>>,
    #[serde(default)]
    pub conditioning: Conditioning,
    /// Finite-difference step for marginal effects.
    #[serde(default)]
    pub bump: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateTask {
    pub method: EstimateMethod,
    #[serde(default = "zero_horizon")]
    pub horizons: Vec<usize>,
    /// Independent replications pooled into one panel.
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default = "one")]
    pub history_lags: usize,
    #[serde(default)]
    pub outcome: usize,
}

fn zero_horizon() -> Vec<usize> {
    vec![0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimateMethod {
    DiffInMeans {
        a: Vec<f64>,
        a_alt: Vec<f64>,
    },
    Lp {
        #[serde(default)]
        features: bool,
        #[serde(default)]
        history: bool,
        #[serde(default)]
        residualize: potsys::estimators::Residualize,
        #[serde(default)]
        hac_lag: Option<usize>,
    },
    Clp {
        a: Vec<f64>,
        a_alt: Vec<f64>,
        x: Vec<f64>,
    },
    Kernel {
        a: Vec<f64>,
        a_alt: Vec<f64>,
        #[serde(default)]
        options: KernelOptions,
    },
    Iv {
        #[serde(default)]
        coarsening: CoarseningConfig,
        #[serde(default = "default_floor")]
        floor: f64,
    },
    Aipw {
        a: Vec<f64>,
        a_alt: Vec<f64>,
        propensity: PropensityConfig,
        outcome: OutcomeConfig,
        #[serde(default)]
        clip: Option<f64>,
    },
    Attenuation,
}

impl EstimateMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EstimateMethod::DiffInMeans { .. } => "diff_in_means",
            EstimateMethod::Lp { .. } => "lp",
            EstimateMethod::Clp { .. } => "clp",
            EstimateMethod::Kernel { .. } => "kernel",
            EstimateMethod::Iv { .. } => "iv",
            EstimateMethod::Aipw { .. } => "aipw",
            EstimateMethod::Attenuation => "attenuation",
        }
    }

    pub fn lp_options(&self) -> Option<LpOptions> {
        match self {
            EstimateMethod::Lp {
                features,
                history,
                residualize,
                hac_lag,
            } => Some(LpOptions {
                features: *features,
                history: *history,
                residualize: *residualize,
                hac_lag: *hac_lag,
                ..Default::default()
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseningConfig {
    #[default]
    LastAssignmentAndOutcomeSign,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PropensityConfig {
    Known,
    Constant { probs: Vec<f64> },
    Empirical,
    Logistic {
        #[serde(default)]
        history: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutcomeConfig {
    CellLinear {
        #[serde(default)]
        history: bool,
        /// Weight each cell regression by inverse propensities.
        #[serde(default)]
        ipw_weighted: bool,
    },
    Kernel {
        #[serde(default)]
        options: KernelOptions,
    },
    Zero,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerConfig {
    /// The system's own assignment mechanism.
    #[default]
    Known,
    /// Fit to the observed path.
    Fit {
        family: SamFamily,
        #[serde(default)]
        atoms: Option<Vec<Vec<f64>>>,
    },
    Iid {
        atoms: Vec<Vec<f64>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandTestTask {
    #[serde(default = "NullSpec::sharp")]
    pub null: NullSpec,
    #[serde(default = "StatisticSpec::diff_in_means")]
    pub statistic: StatisticSpec,
    pub draws: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Trajectory JSON to test; simulated from the system when absent.
    #[serde(default)]
    pub observed: Option<PathBuf>,
    #[serde(default)]
    pub write_draws: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub start: f64,
    pub stop: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridConfig {
    Points { points: Vec<Vec<f64>> },
    /// Cartesian product of evenly spaced axes, last axis fastest.
    Axes { axes: Vec<Axis> },
}

impl GridConfig {
    pub fn points(&self) -> Vec<Vec<f64>> {
        match self {
            GridConfig::Points { points } => points.clone(),
            GridConfig::Axes { axes } => {
                let mut out: Vec<Vec<f64>> = vec![vec![]];
                for ax in axes {
                    let vals: Vec<f64> = (0..ax.steps)
                        .map(|i| {
                            if ax.steps == 1 {
                                ax.start
                            } else {
                                ax.start + (ax.stop - ax.start) * i as f64 / (ax.steps - 1) as f64
                            }
                        })
                        .collect();
                    out = out
                        .iter()
                        .flat_map(|p| {
                            vals.iter().map(move |v| {
                                let mut q = p.clone();
                                q.push(*v);
                                q
                            })
                        })
                        .collect();
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertTask {
    pub family: NullFamily,
    pub grid: GridConfig,
    #[serde(default = "StatisticSpec::diff_in_means")]
    pub statistic: StatisticSpec,
    pub draws: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub observed: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlTask {
    pub loss: LossSpec,
    #[serde(default)]
    pub state_cap: Option<usize>,
    /// Tabulate the deviation effect of every atom at every state.
    #[serde(default)]
    pub deviations: bool,
    /// Controlled trajectories to simulate under the optimal policy.
    #[serde(default)]
    pub replications: usize,
}

/// A parsed config with its system resolved and checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ScenarioConfig,
    pub spec: SystemSpec,
    pub observed: Option<Trajectory>,
    /// Directory that relative paths in the config resolve against.
    pub base: PathBuf,
}

/// Parses config text. Anything other than a single task is rejected here.
pub fn parse(text: &str) -> Result<ScenarioConfig, CliError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Parse(format!("config is not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CliError::Parse("config must be a JSON object".into()))?;
    if obj.contains_key("tasks") {
        return Err(CliError::Parse("config must contain exactly one task".into()));
    }
    match obj.get("task") {
        Some(serde_json::Value::Object(t)) if t.len() == 1 => {}
        _ => return Err(CliError::Parse("config must contain exactly one task".into())),
    }
    serde_json::from_value(value).map_err(|e| CliError::Parse(format!("config does not match the schema: {e}")))
}

fn read_file(base: &Path, path: &Path, what: &str) -> Result<String, CliError> {
    let full = base.join(path);
    std::fs::read_to_string(&full)
        .map_err(|e| CliError::Validation(format!("{what} {} cannot be read: {e}", full.display())))
}

/// Resolves the system and referenced files and runs the static checks.
pub fn resolve(config: ScenarioConfig, base: &Path) -> Result<Resolved, CliError> {
    let spec = match &config.system {
        SystemSource::Scenario { name, horizon } => {
            let s = potsys::scenarios::build(name)
                .ok_or_else(|| CliError::Validation(format!("unknown scenario '{name}'")))?;
            match horizon {
                Some(h) => s.with_horizon(*h),
                None => s,
            }
        }
        SystemSource::Spec(s) => (**s).clone(),
        SystemSource::File { path } => {
            let text = read_file(base, path, "system file")?;
            SystemSpec::from_json(&text).map_err(|e| CliError::Parse(format!("system file: {e}")))?
        }
        SystemSource::Linear {
            structural,
            horizon,
            noise,
        } => {
            let (dx, da, dy, du, dv, dw) = structural.dims();
            let block = |d: usize| {
                if d == 0 {
                    Distribution::empty()
                } else {
                    Distribution::standard_normal(d)
                }
            };
            SystemSpec {
                spaces: Spaces::new(dx, da, dy, AssignmentDomain::Unbounded),
                noise: noise
                    .as_deref()
                    .cloned()
                    .unwrap_or_else(|| NoiseModel::new(block(du), block(dv), block(dw))),
                sem: SemModel::Linear((**structural).clone()),
                horizon: *horizon,
                initial_history: vec![],
            }
        }
    };
    let violations = validate_system(&spec);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| format!("{v:?}")).collect();
        return Err(CliError::Validation(format!("system fails validation: {}", list.join("; "))));
    }
    check_task(&config.task, &spec)?;
    let observed_path = match &config.task {
        Task::Randtest(t) => t.observed.clone(),
        Task::Invert(t) => t.observed.clone(),
        _ => None,
    };
    let observed = match observed_path {
        Some(p) => {
            let text = read_file(base, &p, "observed trajectory")?;
            Some(
                serde_json::from_str::<Trajectory>(&text)
                    .map_err(|e| CliError::Parse(format!("observed trajectory: {e}")))?,
            )
        }
        None => None,
    };
    Ok(Resolved {
        config,
        spec,
        observed,
        base: base.to_path_buf(),
    })
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn check_test_options(draws: usize, alpha: f64) -> Result<(), CliError> {
    if draws < 100 {
        return Err(invalid(format!("draws = {draws} is below 100")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha = {alpha} outside (0, 1)")));
    }
    Ok(())
}

fn check_task(task: &Task, spec: &SystemSpec) -> Result<(), CliError> {
    match task {
        Task::Simulate(t) if t.replications == 0 => Err(invalid("replications must be positive")),
        Task::Irf(_) if spec.sem.as_linear().is_none() => Err(invalid("irf needs a linear system")),
        Task::Oracle(t) => {
            if t.horizons.is_empty() {
                return Err(invalid("oracle needs at least one horizon"));
            }
            if t.n_reps == 0 {
                return Err(invalid("n_reps must be positive"));
            }
            if t.estimand != Estimand::Marginal && t.a_alt.is_none() {
                return Err(invalid("oracle contrasts need a_alt"));
            }
            Ok(())
        }
        Task::Estimate(t) => {
            if t.horizons.is_empty() {
                return Err(invalid("estimate needs at least one horizon"));
            }
            if t.replications == 0 {
                return Err(invalid("replications must be positive"));
            }
            if t.outcome >= spec.spaces.dy {
                return Err(invalid(format!("outcome {} but dY = {}", t.outcome, spec.spaces.dy)));
            }
            Ok(())
        }
        Task::Randtest(t) => check_test_options(t.draws, t.alpha),
        Task::Invert(t) => {
            check_test_options(t.draws, t.alpha)?;
            let pts = t.grid.points();
            if pts.is_empty() {
                return Err(invalid("grid is empty"));
            }
            let k = t.family.n_params();
            if let Some(p) = pts.iter().find(|p| p.len() != k) {
                return Err(invalid(format!("grid point {p:?} has {} entries, family needs {k}", p.len())));
            }
            Ok(())
        }
        Task::Control(_) if !spec.spaces.is_finite_assignment() => {
            Err(invalid("control needs a finite assignment domain"))
        }
        _ => Ok(()),
    }
}
