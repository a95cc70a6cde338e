//! Ready-made systems used by the bundled configs, the examples in the
//! documentation and the acceptance suite.

use nalgebra::DMatrix;

use crate::linear::LinearStructural;
use crate::system::{
    AssignmentDomain, CrossDependence, Distribution, IvEncouragement, NewsResponse, NoiseModel, ProxyAssignment,
    SemModel, Spaces, SystemSpec,
};

pub const NAMES: [&str; 6] = [
    "linear-confounded",
    "news-impact",
    "iv-encouragement",
    "randtest-fisher",
    "proxy-attenuation",
    "control-toy",
];

/// Builds a named scenario at its default horizon.
pub fn build(name: &str) -> Option<SystemSpec> {
    Some(match name {
        "linear-confounded" => linear_confounded(10_000),
        "news-impact" => news_impact(0.5, 2.0, 0.5, 1_000),
        "iv-encouragement" => iv_encouragement(0.5, 2.0, 10_000),
        "randtest-fisher" => randtest_fisher(200),
        "proxy-attenuation" => proxy_attenuation(1.0, 1.0, 10_000),
        "control-toy" => control_toy(4),
        _ => return None,
    })
}

fn spec(spaces: Spaces, noise: NoiseModel, sem: SemModel, horizon: usize) -> SystemSpec {
    SystemSpec {
        spaces,
        noise,
        sem,
        horizon,
        initial_history: vec![],
    }
}

/// Scalar Gaussian linear system where the feature drives both the
/// assignment (α₀ = 1) and the outcome (γ₀ₓ = 1):
/// `x = 0.5x₋₁ + u`, `a = x + v`, `y = 0.5y₋₁ + x + 2a + w`.
pub fn linear_confounded(horizon: usize) -> SystemSpec {
    let mut ls = LinearStructural::zeros((1, 1, 1, 1, 1, 1));
    ls.chi1[(0, 0)] = 0.5;
    ls.delta[(0, 0)] = 1.0;
    ls.alpha0[(0, 0)] = 1.0;
    ls.gamma[(0, 0)] = 1.0;
    ls.gamma1[(0, 2)] = 0.5;
    ls.gamma0_x[(0, 0)] = 1.0;
    ls.gamma0_a[(0, 0)] = 2.0;
    ls.omega[(0, 0)] = 1.0;
    spec(
        Spaces::new(1, 1, 1, AssignmentDomain::Unbounded),
        NoiseModel::new(
            Distribution::standard_normal(1),
            Distribution::standard_normal(1),
            Distribution::standard_normal(1),
        ),
        SemModel::Linear(ls),
        horizon,
    )
}

/// Binary news shocks `a ~ Bernoulli(p)` with `y = ρy₋₁ + effect·a + w`.
pub fn news_impact(rho: f64, effect: f64, p: f64, horizon: usize) -> SystemSpec {
    spec(
        Spaces::new(0, 1, 1, AssignmentDomain::Binary),
        NoiseModel::new(Distribution::empty(), Distribution::bernoulli(p), Distribution::standard_normal(1)),
        SemModel::NewsImpact {
            response: NewsResponse::PartiallyLinear {
                rho,
                zeta: vec![0.0, effect],
                noise_loading: 1.0,
            },
        },
        horizon,
    )
}

/// News-impact system with no causal effect, used for the sharp null.
pub fn randtest_fisher(horizon: usize) -> SystemSpec {
    news_impact(0.5, 0.0, 0.5, horizon)
}

/// `a ~ Bernoulli(p)`, `y_t = ξ_t + Σ_j ψ_j a_{t-j}`, `ξ_t = ρξ_{t-1} + w_t`;
/// satisfies the homogeneous linear null with Q = len(ψ) − 1, P = 0.
pub fn distributed_lag(psi: &[f64], rho: f64, p: f64, horizon: usize) -> SystemSpec {
    spec(
        Spaces::new(0, 1, 1, AssignmentDomain::Binary),
        NoiseModel::new(Distribution::empty(), Distribution::bernoulli(p), Distribution::standard_normal(1)),
        SemModel::DistributedLag {
            psi: psi.to_vec(),
            rho,
        },
        horizon,
    )
}

/// Randomised encouragement with compliers (effect `complier_effect`) and
/// never-takers shifted up by one, so naive contrasts are confounded.
pub fn iv_encouragement(compliance: f64, complier_effect: f64, horizon: usize) -> SystemSpec {
    let mut corr = DMatrix::identity(3, 3);
    corr[(0, 2)] = 1.0;
    corr[(2, 0)] = 1.0;
    spec(
        Spaces::new(1, 1, 1, AssignmentDomain::Binary),
        NoiseModel::new(
            Distribution::Uniform {
                lo: vec![0.0],
                hi: vec![1.0],
            },
            Distribution::standard_normal(1),
            Distribution::standard_normal(2),
        )
        .with_cross(CrossDependence::VwCorrelated { correlation: corr }),
        SemModel::IvEncouragement(IvEncouragement {
            instrument_prob: 0.5,
            compliance,
            complier_effect,
            never_taker_effect: 0.0,
            never_taker_shift: 1.0,
            rho: 0.5,
        }),
        horizon,
    )
}

/// Measured assignment `ā = loading·a* + v̄` with Var a* = 1 and
/// Var v̄ = `noise_var`; outcome `y = 0.5y₋₁ + a* + w`.
pub fn proxy_attenuation(loading: f64, noise_var: f64, horizon: usize) -> SystemSpec {
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, noise_var]);
    spec(
        Spaces::new(0, 2, 1, AssignmentDomain::Unbounded),
        NoiseModel::new(
            Distribution::empty(),
            Distribution::Gaussian {
                mean: vec![0.0, 0.0],
                covariance: cov,
            },
            Distribution::standard_normal(1),
        ),
        SemModel::Proxy(ProxyAssignment {
            rho: 0.5,
            beta: 1.0,
            intercept: 0.0,
            loading,
        }),
        horizon,
    )
}

/// Two-point shock control problem:
/// `y = 0.8y₋₁ + 0.5 − a + 0.5w`, `w ∈ {−1, 1}` equally likely.
pub fn control_toy(horizon: usize) -> SystemSpec {
    spec(
        Spaces::new(0, 1, 1, AssignmentDomain::Binary),
        NoiseModel::new(
            Distribution::empty(),
            Distribution::bernoulli(0.5),
            Distribution::Discrete {
                points: vec![vec![-1.0], vec![1.0]],
                probs: vec![0.5, 0.5],
            },
        ),
        SemModel::NewsImpact {
            response: NewsResponse::PartiallyLinear {
                rho: 0.8,
                zeta: vec![0.5, -1.0],
                noise_loading: 0.5,
            },
        },
        horizon,
    )
}
