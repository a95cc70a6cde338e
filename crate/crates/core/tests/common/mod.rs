#![allow(dead_code)]

use nalgebra::DMatrix;
use potsys::linear::{assemble, LinearStructural};
use potsys::system::{AssignmentDomain, Distribution, NoiseModel, SemModel, Spaces, SystemSpec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn noise_block(d: usize) -> Distribution {
    if d == 0 {
        Distribution::empty()
    } else {
        Distribution::standard_normal(d)
    }
}

/// Random stable linear system with every block dimension in 1..=3 (no
/// features when `features` is false) and dV ≥ dA. With `gamma_identity`, dV = dA and
/// Γ = I.
pub fn random_linear(rng: &mut ChaCha8Rng, features: bool, gamma_identity: bool, horizon: usize) -> SystemSpec {
    let dx = if features { rng.random_range(1..=3) } else { 0 };
    let da = rng.random_range(1..=3);
    let dy = rng.random_range(1..=3);
    let du = dx;
    let dv = if gamma_identity { da } else { rng.random_range(da..=3) };
    let dw = rng.random_range(1..=3);
    let n = dx + da + dy;
    let mut ls = LinearStructural::zeros((dx, da, dy, du, dv, dw));
    ls.chi1 = gauss(rng, dx, n, 0.5);
    ls.alpha0 = gauss(rng, da, dx, 0.5);
    ls.alpha1 = gauss(rng, da, n, 0.5);
    ls.gamma = if gamma_identity {
        DMatrix::identity(da, da)
    } else {
        gauss(rng, da, dv, 1.0)
    };
    ls.delta = gauss(rng, dx, du, 1.0);
    ls.gamma0_x = gauss(rng, dy, dx, 0.5);
    ls.gamma0_a = gauss(rng, dy, da, 1.0);
    ls.gamma1 = gauss(rng, dy, n, 0.5);
    ls.omega = gauss(rng, dy, dw, 1.0);
    let sr = assemble(&ls).unwrap().spectral_radius;
    if sr > 0.9 {
        // φ is linear in the lag matrices
        let c = 0.9 / sr;
        ls.chi1 *= c;
        ls.alpha1 *= c;
        ls.gamma1 *= c;
    }
    SystemSpec {
        spaces: Spaces::new(dx, da, dy, AssignmentDomain::Unbounded),
        noise: NoiseModel::new(noise_block(du), noise_block(dv), noise_block(dw)),
        sem: SemModel::Linear(ls),
        horizon,
        initial_history: vec![],
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
