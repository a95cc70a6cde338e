//! Structural equation components (χ, α, γ) of a potential system.
//!
//! Every model sees the history as the window of its last `order()` records,
//! oldest first, and is evaluated in the triangular order x → a → y.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::linear::LinearStructural;

use super::{DataRecord, Spaces, Violation};

/// Deterministic SEM components of an m-order potential system.
pub trait StructuralModel: Send + Sync + fmt::Debug {
    fn order(&self) -> usize;
    fn feature(&self, history: &[DataRecord], u: &[f64]) -> Vec<f64>;
    fn assignment(&self, history: &[DataRecord], x: &[f64], v: &[f64]) -> Vec<f64>;
    fn outcome(&self, history: &[DataRecord], x: &[f64], a: &[f64], w: &[f64]) -> Vec<f64>;

    /// Dimension checks that must pass before the model may be evaluated.
    fn check_dims(&self, _spaces: &Spaces, _noise_dims: (usize, usize, usize)) -> Vec<Violation> {
        Vec::new()
    }
}

/// Wrapper for user-supplied models; not serialisable.
#[derive(Clone)]
pub struct CustomSem(pub Arc<dyn StructuralModel>);

impl fmt::Debug for CustomSem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Custom({:?})", self.0)
    }
}

/// Outcome equation of the news-impact system `y_t = γ(y_{t-1}, a_t, w_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NewsResponse {
    /// `y = rho*y_{t-1} + zeta(a) + loading*w`, with `zeta` a polynomial whose
    /// coefficients are listed from the constant term upwards.
    PartiallyLinear {
        rho: f64,
        zeta: Vec<f64>,
        #[serde(default = "one")]
        noise_loading: f64,
    },
    /// `y = a*y_{t-1} + loading*w`.
    Interaction {
        #[serde(default = "one")]
        noise_loading: f64,
    },
}

fn one() -> f64 {
    1.0
}

pub fn polynomial(coeffs: &[f64], a: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * a + c)
}

/// Binary encouragement design: `x` is a randomised instrument, a share
/// `compliance` of periods comply (`a = x`), the rest never take (`a = 0`).
/// Compliance type is read from `v` in the assignment equation and from the
/// second outcome-noise coordinate in the outcome equation; the noise model
/// must correlate those two perfectly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvEncouragement {
    pub instrument_prob: f64,
    pub compliance: f64,
    pub complier_effect: f64,
    pub never_taker_effect: f64,
    /// Outcome level shift for never-takers (confounds naive comparisons).
    pub never_taker_shift: f64,
    pub rho: f64,
}

impl IvEncouragement {
    fn cutoff(&self) -> f64 {
        if self.compliance <= 0.0 {
            f64::NEG_INFINITY
        } else if self.compliance >= 1.0 {
            f64::INFINITY
        } else {
            Normal::standard().inverse_cdf(self.compliance)
        }
    }

    /// Compliance type implied by a standard-normal type draw.
    pub fn is_complier(&self, type_draw: f64) -> bool {
        type_draw < self.cutoff()
    }
}

/// Noisy measurement of a scalar causal assignment:
/// `a* = v_0`, `ā = intercept + loading*a* + v_1`, `y = rho*y_{t-1} + beta*a* + w`.
/// Assignments are recorded as `(a*, ā)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyAssignment {
    pub rho: f64,
    pub beta: f64,
    pub intercept: f64,
    pub loading: f64,
}

/// The built-in structural families plus an escape hatch for custom code.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SemModel {
    /// Homogeneous linear Markov system.
    Linear(LinearStructural),
    /// Linear system with `a = 1{α₁d + α₀x + Γv > threshold}` (dA = 1).
    BinaryLinear {
        structural: LinearStructural,
        #[serde(default)]
        threshold: f64,
    },
    /// Feature-free system with `a = v` and `y = γ(y_{t-1}, a, w)`.
    NewsImpact { response: NewsResponse },
    /// `a = v`, `y_t = ξ_t + Σ_j ψ_j a_{t-j}`, `ξ_t = rho*ξ_{t-1} + w_t`.
    DistributedLag { psi: Vec<f64>, rho: f64 },
    IvEncouragement(IvEncouragement),
    Proxy(ProxyAssignment),
    #[serde(skip)]
    Custom(CustomSem),
}

impl SemModel {
    pub fn custom(model: impl StructuralModel + 'static) -> Self {
        SemModel::Custom(CustomSem(Arc::new(model)))
    }

    pub fn as_linear(&self) -> Option<&LinearStructural> {
        match self {
            SemModel::Linear(ls) => Some(ls),
            _ => None,
        }
    }
}

fn last(history: &[DataRecord]) -> Option<&DataRecord> {
    history.last()
}

fn lagged_d(history: &[DataRecord], n: usize) -> DVector<f64> {
    match last(history) {
        Some(r) => DVector::from_vec(r.stacked()),
        None => DVector::zeros(n),
    }
}

fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> DVector<f64> {
    m * DVector::from_column_slice(v)
}

impl StructuralModel for SemModel {
    fn order(&self) -> usize {
        match self {
            SemModel::DistributedLag { psi, .. } => psi.len().max(1),
            SemModel::Custom(c) => c.0.order(),
            _ => 1,
        }
    }

    fn feature(&self, history: &[DataRecord], u: &[f64]) -> Vec<f64> {
        match self {
            SemModel::Linear(ls) | SemModel::BinaryLinear { structural: ls, .. } => {
                let d = lagged_d(history, ls.state_dim());
                (&ls.chi1 * d + mat_vec(&ls.delta, u)).iter().cloned().collect()
            }
            SemModel::NewsImpact { .. } | SemModel::DistributedLag { .. } | SemModel::Proxy(_) => vec![],
            SemModel::IvEncouragement(iv) => {
                vec![if u[0] < iv.instrument_prob { 1.0 } else { 0.0 }]
            }
            SemModel::Custom(c) => c.0.feature(history, u),
        }
    }

    fn assignment(&self, history: &[DataRecord], x: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            SemModel::Linear(ls) => {
                let d = lagged_d(history, ls.state_dim());
                (&ls.alpha1 * d + mat_vec(&ls.alpha0, x) + mat_vec(&ls.gamma, v))
                    .iter()
                    .cloned()
                    .collect()
            }
            SemModel::BinaryLinear { structural: ls, threshold } => {
                let d = lagged_d(history, ls.state_dim());
                let idx = &ls.alpha1 * d + mat_vec(&ls.alpha0, x) + mat_vec(&ls.gamma, v);
                idx.iter().map(|s| if *s > *threshold { 1.0 } else { 0.0 }).collect()
            }
            SemModel::NewsImpact { .. } | SemModel::DistributedLag { .. } => v.to_vec(),
            SemModel::IvEncouragement(iv) => {
                let takes = x[0] > 0.5 && iv.is_complier(v[0]);
                vec![if takes { 1.0 } else { 0.0 }]
            }
            SemModel::Proxy(p) => vec![v[0], p.intercept + p.loading * v[0] + v[1]],
            SemModel::Custom(c) => c.0.assignment(history, x, v),
        }
    }

    fn outcome(&self, history: &[DataRecord], x: &[f64], a: &[f64], w: &[f64]) -> Vec<f64> {
        let prev_y = |i: usize| last(history).map_or(0.0, |r| r.y[i]);
        match self {
            SemModel::Linear(ls) | SemModel::BinaryLinear { structural: ls, .. } => {
                let d = lagged_d(history, ls.state_dim());
                (&ls.gamma1 * d + mat_vec(&ls.gamma0_x, x) + mat_vec(&ls.gamma0_a, a) + mat_vec(&ls.omega, w))
                    .iter()
                    .cloned()
                    .collect()
            }
            SemModel::NewsImpact { response } => match response {
                NewsResponse::PartiallyLinear { rho, zeta, noise_loading } => {
                    vec![rho * prev_y(0) + polynomial(zeta, a[0]) + noise_loading * w[0]]
                }
                NewsResponse::Interaction { noise_loading } => {
                    vec![a[0] * prev_y(0) + noise_loading * w[0]]
                }
            },
            SemModel::DistributedLag { psi, rho } => {
                // history holds the last `order` records, oldest first
                let m = history.len();
                let a_lag = |j: usize| -> f64 {
                    if j == 0 {
                        a[0]
                    } else if j <= m {
                        history[m - j].a[0]
                    } else {
                        0.0
                    }
                };
                let xi_prev = if *rho != 0.0 && m > 0 {
                    let mut effect = 0.0;
                    for (j, p) in psi.iter().enumerate() {
                        effect += p * a_lag(j + 1);
                    }
                    history[m - 1].y[0] - effect
                } else {
                    0.0
                };
                let mut y = rho * xi_prev + w[0];
                for (j, p) in psi.iter().enumerate() {
                    y += p * a_lag(j);
                }
                vec![y]
            }
            SemModel::IvEncouragement(iv) => {
                let complier = iv.is_complier(w[1]);
                let effect = if complier { iv.complier_effect } else { iv.never_taker_effect };
                let shift = if complier { 0.0 } else { iv.never_taker_shift };
                vec![iv.rho * prev_y(0) + a[0] * effect + shift + w[0]]
            }
            SemModel::Proxy(p) => vec![p.rho * prev_y(0) + p.beta * a[0] + w[0]],
            SemModel::Custom(c) => c.0.outcome(history, x, a, w),
        }
    }

    fn check_dims(&self, spaces: &Spaces, (du, dv, dw): (usize, usize, usize)) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut need = |at: &str, expected: usize, got: usize| {
            if expected != got {
                out.push(Violation::Dimension {
                    at: at.to_string(),
                    expected,
                    got,
                });
            }
        };
        match self {
            SemModel::Linear(ls) | SemModel::BinaryLinear { structural: ls, .. } => {
                return ls.violations(spaces, (du, dv, dw)).into_iter().chain(
                    match self {
                        SemModel::BinaryLinear { .. } if spaces.da != 1 => vec![Violation::Dimension {
                            at: "assignment".into(),
                            expected: 1,
                            got: spaces.da,
                        }],
                        _ => vec![],
                    },
                )
                .collect();
            }
            SemModel::NewsImpact { .. } => {
                need("spaces.dx", 0, spaces.dx);
                need("spaces.da", 1, spaces.da);
                need("spaces.dy", 1, spaces.dy);
                need("noise.v", 1, dv);
                need("noise.w", 1, dw);
            }
            SemModel::DistributedLag { .. } => {
                need("spaces.dx", 0, spaces.dx);
                need("spaces.da", 1, spaces.da);
                need("spaces.dy", 1, spaces.dy);
                need("noise.v", 1, dv);
                need("noise.w", 1, dw);
            }
            SemModel::IvEncouragement(_) => {
                need("spaces.dx", 1, spaces.dx);
                need("spaces.da", 1, spaces.da);
                need("spaces.dy", 1, spaces.dy);
                need("noise.u", 1, du);
                need("noise.v", 1, dv);
                need("noise.w", 2, dw);
            }
            SemModel::Proxy(_) => {
                need("spaces.dx", 0, spaces.dx);
                need("spaces.da", 2, spaces.da);
                need("spaces.dy", 1, spaces.dy);
                need("noise.v", 2, dv);
                need("noise.w", 1, dw);
            }
            SemModel::Custom(c) => return c.0.check_dims(spaces, (du, dv, dw)),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_evaluates_from_constant_term() {
        assert_eq!(polynomial(&[1.0, 2.0, 3.0], 2.0), 1.0 + 4.0 + 12.0);
        assert_eq!(polynomial(&[], 5.0), 0.0);
    }

    #[test]
    fn complier_cutoff_tracks_share() {
        let mut iv = IvEncouragement {
            instrument_prob: 0.5,
            compliance: 0.5,
            complier_effect: 2.0,
            never_taker_effect: 0.0,
            never_taker_shift: 0.0,
            rho: 0.0,
        };
        assert!(iv.is_complier(-0.1) && !iv.is_complier(0.1));
        iv.compliance = 0.0;
        assert!(!iv.is_complier(-1e9));
    }
}
