//! Homogeneous linear Markov potential systems: VAR(1) assembly, impulse
//! responses, the structural VAR form and the moving-average tail bound.
//!
//! Blocks are always ordered (X, A, Y); noise columns are ordered (U, V, W).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rowmajor, spectral_norm};
use crate::system::{Spaces, Violation};

/// Structural matrices of
/// `X_t = χ₁D_{t-1} + ΔU_t`, `A_t = α₁D_{t-1} + α₀X_t + ΓV_t`,
/// `Y_t = γ₁D_{t-1} + γ₀ₓX_t + γ₀ₐA_t + ΩW_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStructural {
    #[serde(with = "rowmajor")]
    pub chi1: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub alpha0: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub alpha1: DMatrix<f64>,
    /// Γ, loading of V_t on A_t.
    #[serde(with = "rowmajor")]
    pub gamma: DMatrix<f64>,
    /// Δ, loading of U_t on X_t.
    #[serde(with = "rowmajor")]
    pub delta: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub gamma0_x: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub gamma0_a: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub gamma1: DMatrix<f64>,
    /// Ω, loading of W_t on Y_t.
    #[serde(with = "rowmajor")]
    pub omega: DMatrix<f64>,
}

/// Block dimensions (dx, da, dy, du, dv, dw).
pub type Dims = (usize, usize, usize, usize, usize, usize);

impl LinearStructural {
    /// All-zero system with the given block and noise dimensions.
    pub fn zeros((dx, da, dy, du, dv, dw): Dims) -> Self {
        let n = dx + da + dy;
        LinearStructural {
            chi1: DMatrix::zeros(dx, n),
            alpha0: DMatrix::zeros(da, dx),
            alpha1: DMatrix::zeros(da, n),
            gamma: DMatrix::zeros(da, dv),
            delta: DMatrix::zeros(dx, du),
            gamma0_x: DMatrix::zeros(dy, dx),
            gamma0_a: DMatrix::zeros(dy, da),
            gamma1: DMatrix::zeros(dy, n),
            omega: DMatrix::zeros(dy, dw),
        }
    }

    /// Scalar feature-free system `A_t = ΓV_t`, `Y_t = ρY_{t-1} + γ₀ₐA_t + W_t`.
    pub fn scalar(rho: f64, gamma0_a: f64, gamma: f64) -> Self {
        let mut ls = Self::zeros((0, 1, 1, 0, 1, 1));
        ls.gamma[(0, 0)] = gamma;
        ls.gamma0_a[(0, 0)] = gamma0_a;
        ls.gamma1[(0, 1)] = rho;
        ls.omega[(0, 0)] = 1.0;
        ls
    }

    pub fn dims(&self) -> Dims {
        (
            self.chi1.nrows(),
            self.alpha0.nrows(),
            self.gamma1.nrows(),
            self.delta.ncols(),
            self.gamma.ncols(),
            self.omega.ncols(),
        )
    }

    pub fn state_dim(&self) -> usize {
        let (dx, da, dy, ..) = self.dims();
        dx + da + dy
    }

    fn shape_violations(&self) -> Vec<Violation> {
        let (dx, da, dy, du, dv, dw) = self.dims();
        let n = dx + da + dy;
        let expect = [
            ("chi1", &self.chi1, dx, n),
            ("alpha0", &self.alpha0, da, dx),
            ("alpha1", &self.alpha1, da, n),
            ("Gamma", &self.gamma, da, dv),
            ("Delta", &self.delta, dx, du),
            ("gamma0X", &self.gamma0_x, dy, dx),
            ("gamma0A", &self.gamma0_a, dy, da),
            ("gamma1", &self.gamma1, dy, n),
            ("Omega", &self.omega, dy, dw),
        ];
        let mut out = Vec::new();
        for (name, m, r, c) in expect {
            if m.nrows() != r {
                out.push(Violation::Dimension {
                    at: format!("{name}.rows"),
                    expected: r,
                    got: m.nrows(),
                });
            }
            if m.ncols() != c {
                out.push(Violation::Dimension {
                    at: format!("{name}.cols"),
                    expected: c,
                    got: m.ncols(),
                });
            }
        }
        out
    }

    /// Shape checks plus agreement with the declared spaces and noise.
    pub fn violations(&self, spaces: &Spaces, (du, dv, dw): (usize, usize, usize)) -> Vec<Violation> {
        let mut out = self.shape_violations();
        let (dx, da, dy, ldu, ldv, ldw) = self.dims();
        for (at, expected, got) in [
            ("spaces.dx", dx, spaces.dx),
            ("spaces.da", da, spaces.da),
            ("spaces.dy", dy, spaces.dy),
            ("noise.u", ldu, du),
            ("noise.v", ldv, dv),
            ("noise.w", ldw, dw),
        ] {
            if expected != got {
                out.push(Violation::Dimension {
                    at: at.into(),
                    expected,
                    got,
                });
            }
        }
        out
    }

    fn check(&self) -> Result<()> {
        match self.shape_violations().into_iter().next() {
            None => Ok(()),
            Some(Violation::Dimension { at, expected, got }) => Err(Error::dim(at, expected, got)),
            Some(v) => Err(Error::InvalidSystem(v.to_string())),
        }
    }
}

/// Reduced VAR(1) form `D_t = φD_{t-1} + Bε_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReduced {
    #[serde(with = "rowmajor")]
    pub phi: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub b: DMatrix<f64>,
    /// Transition used while the assignment is held fixed inside a
    /// multi-period intervention: (χ₁; 0; γ₁ + γ₀ₓχ₁).
    #[serde(with = "rowmajor")]
    pub mid: DMatrix<f64>,
    #[serde(with = "rowmajor")]
    pub gamma0_a: DMatrix<f64>,
    /// Γ, kept for the relative IRF.
    #[serde(with = "rowmajor")]
    pub gamma: DMatrix<f64>,
    pub dims: Dims,
    pub stable: bool,
    pub spectral_radius: f64,
}

pub fn assemble(ls: &LinearStructural) -> Result<LinearReduced> {
    ls.check()?;
    let (dx, da, dy, du, dv, dw) = ls.dims();
    let n = dx + da + dy;
    let a_row = &ls.alpha1 + &ls.alpha0 * &ls.chi1;
    let y_row = &ls.gamma1 + &ls.gamma0_x * &ls.chi1 + &ls.gamma0_a * &a_row;
    let mut phi = DMatrix::zeros(n, n);
    phi.view_mut((0, 0), (dx, n)).copy_from(&ls.chi1);
    phi.view_mut((dx, 0), (da, n)).copy_from(&a_row);
    phi.view_mut((dx + da, 0), (dy, n)).copy_from(&y_row);

    let mut b = DMatrix::zeros(n, du + dv + dw);
    b.view_mut((0, 0), (dx, du)).copy_from(&ls.delta);
    b.view_mut((dx, 0), (da, du)).copy_from(&(&ls.alpha0 * &ls.delta));
    b.view_mut((dx, du), (da, dv)).copy_from(&ls.gamma);
    let yu = (&ls.gamma0_x + &ls.gamma0_a * &ls.alpha0) * &ls.delta;
    b.view_mut((dx + da, 0), (dy, du)).copy_from(&yu);
    b.view_mut((dx + da, du), (dy, dv)).copy_from(&(&ls.gamma0_a * &ls.gamma));
    b.view_mut((dx + da, du + dv), (dy, dw)).copy_from(&ls.omega);

    let mut mid = DMatrix::zeros(n, n);
    mid.view_mut((0, 0), (dx, n)).copy_from(&ls.chi1);
    mid.view_mut((dx + da, 0), (dy, n))
        .copy_from(&(&ls.gamma1 + &ls.gamma0_x * &ls.chi1));

    let spectral_radius = spectral_radius(&phi);
    Ok(LinearReduced {
        phi,
        b,
        mid,
        gamma0_a: ls.gamma0_a.clone(),
        gamma: ls.gamma.clone(),
        dims: ls.dims(),
        stable: spectral_radius < 1.0,
        spectral_radius,
    })
}

/// Largest absolute eigenvalue: power iteration (tolerance 1e-12, at most
/// 10⁴ steps), falling back to the full eigenvalue computation when the
/// iteration does not settle.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    if let Some(r) = power_iteration(m, 1e-12, 10_000) {
        return r;
    }
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn power_iteration(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Option<f64> {
    let n = m.nrows();
    // generic start so that no eigen-direction is missed by construction
    let mut v = DVector::from_iterator(n, (0..n).map(|i| 1.0 + 0.618_034 * (i as f64 + 1.0).sin()));
    v /= v.norm();
    let mut prev = f64::NAN;
    for _ in 0..max_iter {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        if (norm - prev).abs() <= tol * norm.max(1.0) {
            return Some(norm);
        }
        prev = norm;
        v = w / norm;
    }
    None
}

/// Impulse responses up to horizon H: `Ψ_h = φ^h (0; I; γ₀ₐ)` and `Θ_h = φ^h B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrfTable {
    pub horizon: usize,
    #[serde(with = "rowmajor::vec")]
    pub psi: Vec<DMatrix<f64>>,
    #[serde(with = "rowmajor::vec")]
    pub theta: Vec<DMatrix<f64>>,
    pub dims: Dims,
}

/// The assignment impulse `(0; I; γ₀ₐ)`.
pub fn assignment_impulse(lr: &LinearReduced) -> DMatrix<f64> {
    let (dx, da, dy, ..) = lr.dims;
    let mut s = DMatrix::zeros(dx + da + dy, da);
    s.view_mut((dx, 0), (da, da)).fill_with_identity();
    s.view_mut((dx + da, 0), (dy, da)).copy_from(&lr.gamma0_a);
    s
}

pub fn irf(lr: &LinearReduced, horizon: usize) -> IrfTable {
    let mut psi = Vec::with_capacity(horizon + 1);
    let mut theta = Vec::with_capacity(horizon + 1);
    psi.push(assignment_impulse(lr));
    theta.push(lr.b.clone());
    let (_, _, _, du, dv, dw) = lr.dims;
    for h in 1..=horizon {
        let p = &lr.phi * &psi[h - 1];
        // per noise block, so the V block follows the same arithmetic as Ψ
        let prev = &theta[h - 1];
        let mut t = DMatrix::zeros(prev.nrows(), prev.ncols());
        for (start, width) in [(0, du), (du, dv), (du + dv, dw)] {
            if width > 0 {
                t.columns_mut(start, width)
                    .copy_from(&(&lr.phi * prev.columns(start, width)));
            }
        }
        psi.push(p);
        theta.push(t);
    }
    IrfTable {
        horizon,
        psi,
        theta,
        dims: lr.dims,
    }
}

impl IrfTable {
    /// Outcome rows of Ψ_h.
    pub fn outcome_psi(&self, h: usize) -> DMatrix<f64> {
        let (dx, da, dy, ..) = self.dims;
        self.psi[h].rows(dx + da, dy).into_owned()
    }

    /// Long-format CSV: h, block, row, col, psi, theta. `psi` is empty for
    /// columns beyond dA and `theta` for columns beyond dε.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let (dx, da, dy, ..) = self.dims;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["h", "block", "row", "col", "psi", "theta"])?;
        let ncol = self.theta.first().map_or(0, |t| t.ncols()).max(da);
        for h in 0..=self.horizon {
            for i in 0..dx + da + dy {
                let (block, row) = if i < dx {
                    ("x", i)
                } else if i < dx + da {
                    ("a", i - dx)
                } else {
                    ("y", i - dx - da)
                };
                for j in 0..ncol {
                    let psi = if j < da { fmt_num(self.psi[h][(i, j)]) } else { String::new() };
                    let theta = if j < self.theta[h].ncols() {
                        fmt_num(self.theta[h][(i, j)])
                    } else {
                        String::new()
                    };
                    wtr.write_record([h.to_string(), block.to_string(), row.to_string(), j.to_string(), psi, theta])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

pub(crate) fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Outcome rows of Θ_h's V-columns multiplied by Γ⁻¹, checked against the
/// outcome rows of Ψ_h.
pub fn relative_irf(lr: &LinearReduced, horizon: usize) -> Result<Vec<DMatrix<f64>>> {
    let (dx, da, dy, du, dv, _) = lr.dims;
    if lr.gamma.nrows() != lr.gamma.ncols() {
        return Err(Error::Singular("Gamma is not square".into()));
    }
    let ginv = lr
        .gamma
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("Gamma".into()))?;
    if crate::linalg::sym_condition(&(lr.gamma.transpose() * &lr.gamma)) >= crate::linalg::MAX_CONDITION {
        return Err(Error::Singular("Gamma".into()));
    }
    let table = irf(lr, horizon);
    let mut out = Vec::with_capacity(horizon + 1);
    for h in 0..=horizon {
        let theta_v = table.theta[h].view((dx + da, du), (dy, dv));
        let rel = theta_v * &ginv;
        let psi = table.outcome_psi(h);
        let scale = psi.abs().max().max(1.0);
        let gap = (&rel - &psi).abs().max();
        if gap > 1e-12 * scale {
            return Err(Error::RelativeIrfMismatch(gap));
        }
        out.push(rel);
    }
    Ok(out)
}

/// Difference D_{t,h}(a_{t:t+s}) − D_{t,h}(a′_{t:t+s}) for h = 0..H, given
/// the assignment differences `deltas[j] = a_{t+j} − a′_{t+j}`, j = 0..s.
pub fn multi_period_effect(lr: &LinearReduced, deltas: &[DVector<f64>], horizon: usize) -> Result<Vec<DVector<f64>>> {
    let (dx, da, dy, ..) = lr.dims;
    if deltas.is_empty() {
        return Err(Error::InvalidArgument("empty intervention path".into()));
    }
    if let Some(d) = deltas.iter().find(|d| d.len() != da) {
        return Err(Error::dim("assignment difference", da, d.len()));
    }
    let s = deltas.len() - 1;
    if s > horizon {
        return Err(Error::InvalidArgument(format!("intervention length {s} exceeds horizon {horizon}")));
    }
    let impulse = assignment_impulse(lr);
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(&impulse * &deltas[0]);
    for h in 1..=horizon {
        let prev = &out[h - 1];
        let next = if h <= s {
            &lr.mid * prev + &impulse * &deltas[h]
        } else {
            &lr.phi * prev
        };
        out.push(next);
    }
    let _ = dx + dy;
    Ok(out)
}

/// Structural VAR form `B̃D_t = φ̃D_{t-1} + ε_t` with `(B̃, φ̃) = (B⁻¹, B⁻¹φ)`.
pub fn svar_form(lr: &LinearReduced) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if lr.b.nrows() != lr.b.ncols() {
        return Err(Error::Singular("noise loading B is not square".into()));
    }
    let cond = crate::linalg::sym_condition(&(lr.b.transpose() * &lr.b));
    if cond >= crate::linalg::MAX_CONDITION {
        return Err(Error::Singular("noise loading B".into()));
    }
    let b_inv = lr
        .b
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("noise loading B".into()))?;
    let phi_tilde = &b_inv * &lr.phi;
    Ok((b_inv, phi_tilde))
}

/// Inverse of [`svar_form`]: recovers (φ, B).
pub fn from_svar(b_tilde: &DMatrix<f64>, phi_tilde: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let b = b_tilde
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular("B-tilde".into()))?;
    let phi = &b * phi_tilde;
    Ok((phi, b))
}

/// Bound on the L²-norm of the moving-average tail `Σ_{j≥L} φ^j Bε_{t-j}`:
/// `‖φ‖^L ‖B‖ sqrt(E|ε|²) / (1 − ‖φ‖)` with spectral norms. Needs ‖φ‖ < 1.
pub fn svma_truncation_error(lr: &LinearReduced, lags: usize, noise_second_moment: f64) -> Result<f64> {
    if !lr.stable {
        return Err(Error::Unstable(lr.spectral_radius));
    }
    let norm = spectral_norm(&lr.phi);
    if norm >= 1.0 {
        return Err(Error::Unstable(norm));
    }
    let c = spectral_norm(&lr.b) * noise_second_moment.max(0.0).sqrt();
    Ok(norm.powi(lags as i32) * c / (1.0 - norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_no_feature_phi() {
        let lr = assemble(&LinearStructural::scalar(0.5, 2.0, 1.0)).unwrap();
        assert_eq!(lr.phi, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.5]));
        assert!(lr.stable);
        assert!((lr.spectral_radius - 0.5).abs() < 1e-12);
    }

    #[test]
    fn explosive_root_is_reported() {
        let lr = assemble(&LinearStructural::scalar(1.1, 2.0, 1.0)).unwrap();
        assert!(!lr.stable);
        assert!((lr.spectral_radius - 1.1).abs() < 1e-12);
    }

    #[test]
    fn rotation_falls_back_to_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -0.9, 0.9, 0.0]);
        assert!((spectral_radius(&m) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut ls = LinearStructural::scalar(0.5, 2.0, 1.0);
        ls.alpha0 = DMatrix::zeros(2, 0);
        assert!(matches!(assemble(&ls), Err(Error::Dimension { .. })));
    }
}
