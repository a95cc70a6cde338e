use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::rowmajor;

/// Homogeneous linear causal null
/// `g_t = Σ_{j=0}^{Q} ψ_j (a_{t-j} − a′_{t-j}) + Σ_{j=1}^{P} ϑ_j g_{t-j}`,
/// with pre-sample assignment differences and g values equal to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullSpec {
    /// ψ_0..ψ_Q, each dY × dA.
    #[serde(with = "rowmajor::vec")]
    pub psi: Vec<DMatrix<f64>>,
    /// ϑ_1..ϑ_P, each dY × dY.
    #[serde(with = "rowmajor::vec")]
    pub vartheta: Vec<DMatrix<f64>>,
}

/// Shape of a null family; θ stacks ψ_0..ψ_Q then ϑ_1..ϑ_P (row-major).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullFamily {
    pub q: usize,
    pub p: usize,
    pub dy: usize,
    pub da: usize,
}

impl NullFamily {
    pub fn scalar(q: usize, p: usize) -> Self {
        NullFamily { q, p, dy: 1, da: 1 }
    }

    pub fn n_params(&self) -> usize {
        (self.q + 1) * self.dy * self.da + self.p * self.dy * self.dy
    }

    pub fn at(&self, theta: &[f64]) -> Result<NullSpec> {
        if theta.len() != self.n_params() {
            return Err(Error::dim("theta", self.n_params(), theta.len()));
        }
        let k = self.dy * self.da;
        let psi = (0..=self.q)
            .map(|j| DMatrix::from_row_slice(self.dy, self.da, &theta[j * k..(j + 1) * k]))
            .collect();
        let off = (self.q + 1) * k;
        let kk = self.dy * self.dy;
        let vartheta = (0..self.p)
            .map(|j| DMatrix::from_row_slice(self.dy, self.dy, &theta[off + j * kk..off + (j + 1) * kk]))
            .collect();
        Ok(NullSpec { psi, vartheta })
    }
}

impl NullSpec {
    /// Scalar-assignment, scalar-outcome null.
    pub fn scalar(psi: &[f64], vartheta: &[f64]) -> Self {
        NullSpec {
            psi: psi.iter().map(|v| DMatrix::from_element(1, 1, *v)).collect(),
            vartheta: vartheta.iter().map(|v| DMatrix::from_element(1, 1, *v)).collect(),
        }
    }

    pub fn sharp() -> Self {
        Self::scalar(&[0.0], &[])
    }

    pub fn q(&self) -> usize {
        self.psi.len().saturating_sub(1)
    }

    pub fn p(&self) -> usize {
        self.vartheta.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.psi.first().map_or((0, 0), |m| (m.nrows(), m.ncols()))
    }

    pub fn is_zero(&self) -> bool {
        self.psi.iter().all(|m| m.iter().all(|v| *v == 0.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.psi.is_empty() {
            return Err(Error::InvalidArgument("null needs at least psi_0".into()));
        }
        let (dy, da) = self.dims();
        for m in &self.psi {
            if m.shape() != (dy, da) {
                return Err(Error::dim("psi block", dy * da, m.len()));
            }
        }
        for m in &self.vartheta {
            if m.shape() != (dy, dy) {
                return Err(Error::dim("vartheta block", dy * dy, m.len()));
            }
        }
        Ok(())
    }

    /// g_t(a_{1:t}, a′_{1:t}) for t = 1..T by forward recursion.
    pub fn g_path(&self, a: &[Vec<f64>], a_alt: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
        self.validate()?;
        if a.len() != a_alt.len() {
            return Err(Error::dim("assignment path", a.len(), a_alt.len()));
        }
        let mut rec = GRecursion::new(self);
        a.iter().zip(a_alt).map(|(x, y)| rec.push(x, y)).collect()
    }
}

/// Incremental evaluation of g_t as assignments arrive.
#[derive(Debug, Clone)]
pub struct GRecursion<'a> {
    null: &'a NullSpec,
    diffs: Vec<DVector<f64>>,
    gs: Vec<DVector<f64>>,
}

impl<'a> GRecursion<'a> {
    pub fn new(null: &'a NullSpec) -> Self {
        GRecursion {
            null,
            diffs: Vec::new(),
            gs: Vec::new(),
        }
    }

    pub fn push(&mut self, a: &[f64], a_alt: &[f64]) -> Result<DVector<f64>> {
        let (dy, da) = self.null.dims();
        if a.len() != da || a_alt.len() != da {
            return Err(Error::dim("assignment", da, a.len()));
        }
        self.diffs
            .push(DVector::from_iterator(da, a.iter().zip(a_alt).map(|(x, y)| x - y)));
        let t = self.diffs.len();
        let mut g = DVector::zeros(dy);
        for (j, psi) in self.null.psi.iter().enumerate() {
            if j < t {
                g += psi * &self.diffs[t - 1 - j];
            }
        }
        for (j, th) in self.null.vartheta.iter().enumerate() {
            let lag = j + 1;
            if lag < t {
                g += th * &self.gs[t - 1 - lag];
            }
        }
        self.gs.push(g.clone());
        Ok(g)
    }
}
