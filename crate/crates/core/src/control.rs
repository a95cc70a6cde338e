//! Finite-horizon control of finite potential systems by backward induction.
//!
//! The controller picks A_t from D_{1:t-1}; X_t and Y_t then follow from the
//! feature and outcome maps with (U_t, W_t) drawn from their discrete atoms.
//! Period losses are ℓ_t(Y_{t-1}, A_t) for t = 1..T plus a terminal
//! ℓ_{T+1}(Y_T). Expectations are exact sums over noise atoms.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{cell_rng, component};
use crate::simulator::Trajectory;
use crate::system::{step_with, DataRecord, NoiseDraw, Overrides, SystemSpec};

pub const DEFAULT_STATE_CAP: usize = 1_000_000;
pub const TIE_BREAK: &str = "lowest_atom_index";

/// A system with finite assignment atoms and discrete (U, W).
#[derive(Debug, Clone)]
pub struct FinitePS {
    pub spec: SystemSpec,
    pub state_cap: usize,
    atoms: Vec<Vec<f64>>,
    noise_atoms: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

impl FinitePS {
    pub fn new(spec: SystemSpec) -> Result<Self> {
        let atoms = spec
            .spaces
            .atoms()
            .ok_or_else(|| Error::InvalidSystem("control needs a finite assignment domain".into()))?;
        let noise_atoms = spec.noise.uw_atoms()?;
        Ok(FinitePS {
            spec,
            state_cap: DEFAULT_STATE_CAP,
            atoms,
            noise_atoms,
        })
    }

    pub fn with_state_cap(mut self, cap: usize) -> Self {
        self.state_cap = cap;
        self
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    /// Records kept in the tabular state: the system order, at least one so
    /// the last outcome is visible to the loss.
    pub fn window_len(&self) -> usize {
        self.spec.order().max(1)
    }

    pub fn initial_state(&self) -> Vec<DataRecord> {
        let mut pad = self.spec.padding();
        if pad.is_empty() {
            pad.push(DataRecord::zeros(0, &self.spec.spaces));
        }
        let k = self.window_len();
        pad[pad.len() - k..].to_vec()
    }

    fn next_state(&self, state: &[DataRecord], a: &[f64], u: &[f64], w: &[f64]) -> Result<Vec<DataRecord>> {
        let dv = self.spec.noise.dims().1;
        let noise = NoiseDraw {
            u: u.to_vec(),
            v: vec![0.0; dv],
            w: w.to_vec(),
            stream: (0, 0),
        };
        let rec = step_with(&self.spec, state, &noise, Overrides { x: None, a: Some(a) })?;
        let mut next: Vec<DataRecord> = state[1..].to_vec();
        next.push(rec);
        Ok(next)
    }
}

fn state_key(state: &[DataRecord]) -> Vec<u64> {
    state
        .iter()
        .flat_map(|r| r.x.iter().chain(&r.a).chain(&r.y).map(|v| (v + 0.0).to_bits()))
        .collect()
}

fn last_y(state: &[DataRecord]) -> &[f64] {
    &state.last().expect("tabular state is never empty").y
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub y: Vec<f64>,
    pub a: Vec<f64>,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalEntry {
    pub y: Vec<f64>,
    pub loss: f64,
}

/// (next state, probability) per (stage, state, atom).
type Transitions = Vec<Vec<Vec<Vec<(usize, f64)>>>>;
type PeriodFn = dyn Fn(usize, &[f64], &[f64]) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Time-separable loss.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Zero,
    /// ℓ_t(y, a) = wy (y₀ − y*)² + wa (a₀ − a*)², ℓ_{T+1}(y) = wT (y₀ − y*)².
    Quadratic {
        y_target: f64,
        y_weight: f64,
        a_target: f64,
        a_weight: f64,
        terminal_weight: f64,
    },
    /// Explicit tables; a single period table is reused for every t.
    Table {
        per_period: Vec<Vec<LossEntry>>,
        terminal: Vec<TerminalEntry>,
    },
    #[serde(skip)]
    Custom {
        period: Arc<PeriodFn>,
        terminal: Arc<TerminalFn>,
    },
}

impl std::fmt::Debug for LossSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossSpec::Zero => write!(f, "zero"),
            LossSpec::Quadratic { .. } => write!(f, "quadratic"),
            LossSpec::Table { per_period, terminal } => {
                write!(f, "table({} periods, {} terminal)", per_period.len(), terminal.len())
            }
            LossSpec::Custom { .. } => write!(f, "custom"),
        }
    }
}

impl LossSpec {
    /// ℓ_t(y_{t-1}, a_t).
    pub fn period(&self, t: usize, y_prev: &[f64], a: &[f64]) -> Result<f64> {
        let v = match self {
            LossSpec::Zero => 0.0,
            LossSpec::Quadratic {
                y_target,
                y_weight,
                a_target,
                a_weight,
                ..
            } => y_weight * (y_prev[0] - y_target).powi(2) + a_weight * (a[0] - a_target).powi(2),
            LossSpec::Table { per_period, .. } => {
                let table = if per_period.len() == 1 {
                    &per_period[0]
                } else {
                    per_period
                        .get(t - 1)
                        .ok_or_else(|| Error::MissingLoss(format!("period {t}")))?
                };
                table
                    .iter()
                    .find(|e| e.y == y_prev && e.a == a)
                    .map(|e| e.loss)
                    .ok_or_else(|| Error::MissingLoss(format!("t={t}, y={y_prev:?}, a={a:?}")))?
            }
            LossSpec::Custom { period, .. } => period(t, y_prev, a),
        };
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite loss at t={t}")));
        }
        Ok(v)
    }

    /// ℓ_{T+1}(y_T).
    pub fn terminal(&self, y: &[f64]) -> Result<f64> {
        let v = match self {
            LossSpec::Zero => 0.0,
            LossSpec::Quadratic {
                y_target,
                terminal_weight,
                ..
            } => terminal_weight * (y[0] - y_target).powi(2),
            LossSpec::Table { terminal, .. } => terminal
                .iter()
                .find(|e| e.y == y)
                .map(|e| e.loss)
                .ok_or_else(|| Error::MissingLoss(format!("terminal y={y:?}")))?,
            LossSpec::Custom { terminal, .. } => terminal(y),
        };
        if !v.is_finite() {
            return Err(Error::InvalidArgument("non-finite terminal loss".into()));
        }
        Ok(v)
    }
}

/// Optimal policy â_{t|t-1} and value 𝒱_t on the reachable tabular states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyTable {
    pub horizon: usize,
    pub atoms: Vec<Vec<f64>>,
    /// states[t-1] for t = 1..T+1; each state is the last records window.
    pub states: Vec<Vec<Vec<DataRecord>>>,
    /// Atom index chosen at (t, state) for t = 1..T.
    pub action: Vec<Vec<usize>>,
    /// 𝒱_t for t = 1..T+1; the last stage is the terminal value table.
    pub value: Vec<Vec<f64>>,
    /// Bellman operand per (t, state, atom).
    pub q: Vec<Vec<Vec<f64>>>,
    pub tie_break: String,
    #[serde(skip)]
    transitions: Transitions,
    #[serde(skip)]
    index: Vec<HashMap<Vec<u64>, usize>>,
}

struct Lattice {
    states: Vec<Vec<Vec<DataRecord>>>,
    index: Vec<HashMap<Vec<u64>, usize>>,
    transitions: Transitions,
}

fn enumerate_states(fps: &FinitePS) -> Result<Lattice> {
    let horizon = fps.horizon();
    let init = fps.initial_state();
    let mut index = vec![HashMap::from([(state_key(&init), 0usize)])];
    let mut states = vec![vec![init]];
    let mut transitions = Vec::with_capacity(horizon);
    let mut total = 1usize;
    for t in 0..horizon {
        let mut next_states: Vec<Vec<DataRecord>> = Vec::new();
        let mut next_index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut stage = Vec::with_capacity(states[t].len());
        for s in &states[t] {
            let mut per_action = Vec::with_capacity(fps.atoms.len());
            for a in &fps.atoms {
                let mut out = Vec::with_capacity(fps.noise_atoms.len());
                for (u, w, p) in &fps.noise_atoms {
                    let ns = fps.next_state(s, a, u, w)?;
                    let key = state_key(&ns);
                    let j = match next_index.get(&key) {
                        Some(j) => *j,
                        None => {
                            let j = next_states.len();
                            next_index.insert(key, j);
                            next_states.push(ns);
                            total += 1;
                            if total > fps.state_cap {
                                return Err(Error::StateCap {
                                    count: total,
                                    cap: fps.state_cap,
                                });
                            }
                            j
                        }
                    };
                    out.push((j, *p));
                }
                per_action.push(out);
            }
            stage.push(per_action);
        }
        transitions.push(stage);
        states.push(next_states);
        index.push(next_index);
    }
    Ok(Lattice {
        states,
        index,
        transitions,
    })
}

fn argmin(q: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in q.iter().enumerate() {
        if *v < q[best] {
            best = k;
        }
    }
    best
}

/// Backward induction over the reachable states.
pub fn solve_backward(fps: &FinitePS, loss: &LossSpec) -> Result<PolicyTable> {
    let lat = enumerate_states(fps)?;
    let horizon = fps.horizon();
    let mut value: Vec<Vec<f64>> = vec![Vec::new(); horizon + 1];
    value[horizon] = lat.states[horizon]
        .iter()
        .map(|s| loss.terminal(last_y(s)))
        .collect::<Result<_>>()?;
    let mut action = vec![Vec::new(); horizon];
    let mut q = vec![Vec::new(); horizon];
    for t in (0..horizon).rev() {
        let next = &value[t + 1];
        let stage: Vec<(Vec<f64>, usize)> = lat.states[t]
            .par_iter()
            .zip(&lat.transitions[t])
            .map(|(s, trans)| {
                let qs = fps
                    .atoms
                    .iter()
                    .zip(trans)
                    .map(|(a, out)| {
                        let cont: f64 = out.iter().map(|(j, p)| p * next[*j]).sum();
                        Ok(loss.period(t + 1, last_y(s), a)? + cont)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let k = argmin(&qs);
                Ok((qs, k))
            })
            .collect::<Result<_>>()?;
        value[t] = stage.iter().map(|(qs, k)| qs[*k]).collect();
        action[t] = stage.iter().map(|(_, k)| *k).collect();
        q[t] = stage.into_iter().map(|(qs, _)| qs).collect();
    }
    Ok(PolicyTable {
        horizon,
        atoms: fps.atoms.clone(),
        states: lat.states,
        action,
        value,
        q,
        tie_break: TIE_BREAK.into(),
        transitions: lat.transitions,
        index: lat.index,
    })
}

/// Expected effect of deviating from the policy at one (t, state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationEffect {
    pub t: usize,
    pub state: usize,
    pub action: Vec<f64>,
    pub policy_action: Vec<f64>,
    /// E[Y_{t+h}(a) − Y_{t+h}(â) | state] for h = 0..T−t, future actions
    /// re-optimised by the policy.
    pub contrast: Vec<Vec<f64>>,
    /// Expected loss from t under the deviation minus 𝒱_t(state).
    pub regret: f64,
}

impl PolicyTable {
    /// 𝒱_1 at the initial state.
    pub fn initial_value(&self) -> f64 {
        self.value[0][0]
    }

    /// 𝒱_{T+1} on the terminal states.
    pub fn terminal_values(&self) -> &[f64] {
        &self.value[self.horizon]
    }

    pub fn n_states(&self) -> usize {
        self.states.iter().map(|s| s.len()).sum()
    }

    /// Index of a window at stage t (1-based), if reachable.
    pub fn state_index(&self, t: usize, window: &[DataRecord]) -> Option<usize> {
        self.index.get(t - 1)?.get(&state_key(window)).copied()
    }

    /// Policy action at period t for the given history window.
    pub fn act(&self, t: usize, window: &[DataRecord]) -> Option<&[f64]> {
        let i = self.state_index(t, window)?;
        Some(&self.atoms[self.action[t - 1][i]])
    }

    /// Largest |𝒱_t(s) − min_a Q_t(s, a)| recomputed from the stored value
    /// tables and the loss.
    pub fn bellman_residual(&self, loss: &LossSpec) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for t in 0..self.horizon {
            for (i, s) in self.states[t].iter().enumerate() {
                let mut best = f64::INFINITY;
                for (k, a) in self.atoms.iter().enumerate() {
                    let cont: f64 = self.transitions[t][i][k].iter().map(|(j, p)| p * self.value[t + 1][*j]).sum();
                    best = best.min(loss.period(t + 1, last_y(s), a)? + cont);
                }
                worst = worst.max((self.value[t][i] - best).abs());
            }
        }
        for (i, s) in self.states[self.horizon].iter().enumerate() {
            worst = worst.max((self.value[self.horizon][i] - loss.terminal(last_y(s))?).abs());
        }
        Ok(worst)
    }

    /// CSV rows: t, state, action index, action, value. Terminal rows leave
    /// the action blank.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "state", "action_index", "action", "value"])?;
        let enc = |s: &[DataRecord]| {
            s.iter()
                .map(|r| {
                    let f = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
                    format!("{}|{}|{}", f(&r.x), f(&r.a), f(&r.y))
                })
                .collect::<Vec<_>>()
                .join(";")
        };
        for t in 0..=self.horizon {
            for (i, s) in self.states[t].iter().enumerate() {
                let (ai, av) = if t < self.horizon {
                    let k = self.action[t][i];
                    (
                        k.to_string(),
                        self.atoms[k].iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
                    )
                } else {
                    (String::new(), String::new())
                };
                wtr.write_record([(t + 1).to_string(), enc(s), ai, av, self.value[t][i].to_string()])?;
            }
        }
        wtr.flush().map_err(|e| Error::Io(e.to_string()))?;
        Ok(())
    }
}

/// Deviation from the policy at stage t (1-based) and state index `state`
/// to atom `a`, with the policy followed afterwards.
pub fn deviation_effect(policy: &PolicyTable, t: usize, state: usize, a: &[f64]) -> Result<DeviationEffect> {
    let horizon = policy.horizon;
    if t == 0 || t > horizon {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    let ti = t - 1;
    if state >= policy.states[ti].len() {
        return Err(Error::InvalidArgument(format!("state {state} not reachable at t={t}")));
    }
    let k = policy.atoms.iter().position(|b| b == a).ok_or_else(|| Error::Domain {
        component: "deviation".into(),
        value: a.to_vec(),
    })?;
    let k_star = policy.action[ti][state];
    let path_means = |k0: usize| -> Vec<Vec<f64>> {
        let mut dist = vec![0.0; policy.states[ti + 1].len()];
        for (j, p) in &policy.transitions[ti][state][k0] {
            dist[*j] += p;
        }
        let mut out = Vec::with_capacity(horizon - ti);
        for s in ti + 1..=horizon {
            let dy = last_y(&policy.states[s][0]).len();
            let mut ey = vec![0.0; dy];
            for (j, p) in dist.iter().enumerate() {
                if *p != 0.0 {
                    for (e, y) in ey.iter_mut().zip(last_y(&policy.states[s][j])) {
                        *e += p * y;
                    }
                }
            }
            out.push(ey);
            if s < horizon {
                let mut nd = vec![0.0; policy.states[s + 1].len()];
                for (j, p) in dist.iter().enumerate() {
                    if *p != 0.0 {
                        for (jj, pp) in &policy.transitions[s][j][policy.action[s][j]] {
                            nd[*jj] += p * pp;
                        }
                    }
                }
                dist = nd;
            }
        }
        out
    };
    let contrast = if k == k_star {
        let dy = last_y(&policy.states[ti][state]).len();
        vec![vec![0.0; dy]; horizon - ti]
    } else {
        let dev = path_means(k);
        let opt = path_means(k_star);
        dev.iter()
            .zip(&opt)
            .map(|(d, o)| d.iter().zip(o).map(|(a, b)| a - b).collect())
            .collect()
    };
    Ok(DeviationEffect {
        t,
        state,
        action: a.to_vec(),
        policy_action: policy.atoms[k_star].clone(),
        contrast,
        regret: policy.q[ti][state][k] - policy.value[ti][state],
    })
}

/// Exhaustive expectiminimax over every action path and every noise atom,
/// without tabulating states.
pub fn brute_force_value(fps: &FinitePS, loss: &LossSpec) -> Result<f64> {
    fn go(fps: &FinitePS, loss: &LossSpec, t: usize, state: &[DataRecord]) -> Result<f64> {
        if t > fps.horizon() {
            return loss.terminal(last_y(state));
        }
        let mut best = f64::INFINITY;
        for a in &fps.atoms {
            let mut cont = 0.0;
            for (u, w, p) in &fps.noise_atoms {
                let ns = fps.next_state(state, a, u, w)?;
                cont += p * go(fps, loss, t + 1, &ns)?;
            }
            let q = loss.period(t, last_y(state), a)? + cont;
            if q < best {
                best = q;
            }
        }
        Ok(best)
    }
    go(fps, loss, 1, &fps.initial_state())
}

/// Expected loss of every fixed (open-loop) action path a_{1:T}, in
/// lexicographic atom-index order.
pub fn open_loop_values(fps: &FinitePS, loss: &LossSpec) -> Result<Vec<(Vec<usize>, f64)>> {
    let horizon = fps.horizon();
    let n = fps.atoms.len();
    let total = n.checked_pow(horizon as u32).filter(|c| *c <= fps.state_cap).ok_or(Error::StateCap {
        count: usize::MAX,
        cap: fps.state_cap,
    })?;
    (0..total)
        .into_par_iter()
        .map(|code| {
            let mut path = vec![0usize; horizon];
            let mut c = code;
            for slot in path.iter_mut().rev() {
                *slot = c % n;
                c /= n;
            }
            let mut dist: Vec<(Vec<DataRecord>, f64)> = vec![(fps.initial_state(), 1.0)];
            let mut total_loss = 0.0;
            for (t, k) in path.iter().enumerate() {
                let a = &fps.atoms[*k];
                let mut next = Vec::with_capacity(dist.len() * fps.noise_atoms.len());
                for (s, p) in &dist {
                    total_loss += p * loss.period(t + 1, last_y(s), a)?;
                    for (u, w, q) in &fps.noise_atoms {
                        next.push((fps.next_state(s, a, u, w)?, p * q));
                    }
                }
                dist = next;
            }
            for (s, p) in &dist {
                total_loss += p * loss.terminal(last_y(s))?;
            }
            Ok((path, total_loss))
        })
        .collect()
}

/// Simulates the system with the policy as a degenerate assignment
/// mechanism; (U, W) atoms are drawn from counter cells of `seed`.
pub fn simulate_controlled(fps: &FinitePS, policy: &PolicyTable, seed: u64, replication: u64) -> Result<Trajectory> {
    let mut state = fps.initial_state();
    let mut records = Vec::with_capacity(fps.horizon());
    for t in 1..=fps.horizon() {
        let a = policy
            .act(t, &state)
            .ok_or_else(|| Error::InvalidArgument(format!("state at t={t} missing from the policy table")))?
            .to_vec();
        let r: f64 = cell_rng(seed, replication, t as u64, component::JOINT).random();
        let mut acc = 0.0;
        let mut pick = fps.noise_atoms.len() - 1;
        for (i, (_, _, p)) in fps.noise_atoms.iter().enumerate() {
            acc += p;
            if r < acc {
                pick = i;
                break;
            }
        }
        let (u, w, _) = &fps.noise_atoms[pick];
        state = fps.next_state(&state, &a, u, w)?;
        records.push(state.last().cloned().expect("non-empty state"));
    }
    Ok(Trajectory {
        records,
        seed,
        replication,
    })
}
