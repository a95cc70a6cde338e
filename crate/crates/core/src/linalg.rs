//! Small dense linear-algebra helpers shared by the estimators: least squares
//! with a conditioning guard, Bartlett long-run variances and cluster sums.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest condition number accepted for a design second-moment matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Row-major `{rows, cols, data}` encoding for matrices in JSON documents.
pub mod rowmajor {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} entries, expected {}x{}",
                r.data.len(),
                r.rows,
                r.cols
            )));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }

    /// Same encoding for a list of matrices.
    pub mod vec {
        use super::Repr;
        use nalgebra::DMatrix;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            let reprs: Vec<Repr> = ms
                .iter()
                .map(|m| Repr {
                    rows: m.nrows(),
                    cols: m.ncols(),
                    data: (0..m.nrows())
                        .flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)]))
                        .collect(),
                })
                .collect();
            reprs.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            let reprs = Vec::<Repr>::deserialize(d)?;
            reprs
                .into_iter()
                .map(|r| {
                    if r.data.len() != r.rows * r.cols {
                        Err(serde::de::Error::custom("matrix data length mismatch"))
                    } else {
                        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
                    }
                })
                .collect()
        }
    }
}

/// Least-squares fit of every column of `y` on the columns of `x`.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// k x q coefficient matrix.
    pub coef: DMatrix<f64>,
    /// n x q residuals.
    pub resid: DMatrix<f64>,
    /// (X'X)^{-1}.
    pub xtx_inv: DMatrix<f64>,
}

/// Condition number of a symmetric positive semidefinite matrix.
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a symmetric positive definite matrix, guarded by [`MAX_CONDITION`].
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if sym_condition(m) >= MAX_CONDITION {
        return Err(Error::Singular(what.to_string()));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    Ok(chol.inverse())
}

pub fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LeastSquares> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::dim("least squares rows", n, y.nrows()));
    }
    if n < x.ncols() {
        return Err(Error::InvalidArgument(format!(
            "{} rows cannot identify {} coefficients",
            n,
            x.ncols()
        )));
    }
    let xt = x.transpose();
    let scaled = &xt * x / n as f64;
    let xtx_inv = spd_inverse(&scaled, "design second-moment matrix")? / n as f64;
    let chol = scaled
        .cholesky()
        .ok_or_else(|| Error::Singular("design second-moment matrix".into()))?;
    let mut coef = chol.solve(&(&xt * y / n as f64));
    // one step of iterative refinement on the normal equations
    let mut resid = y - x * &coef;
    coef += chol.solve(&(&xt * &resid / n as f64));
    resid = y - x * &coef;
    Ok(LeastSquares {
        coef,
        resid,
        xtx_inv,
    })
}

/// Binary logistic regression by iteratively reweighted least squares.
/// Returns the coefficients and their inverse-information covariance.
/// Perfect or quasi-perfect separation is reported as a degenerate law.
pub fn logistic_irls(x: &DMatrix<f64>, y: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let k = x.ncols();
    if y.len() != n {
        return Err(Error::dim("logistic response", n, y.len()));
    }
    let mut beta = DVector::zeros(k);
    for _ in 0..100 {
        let eta = x * &beta;
        let mut info = DMatrix::zeros(k, k);
        let mut score = DVector::zeros(k);
        for i in 0..n {
            let p = 1.0 / (1.0 + (-eta[i]).exp());
            let w = p * (1.0 - p);
            let row = x.row(i);
            for a in 0..k {
                score[a] += row[a] * (y[i] - p);
                for b in 0..k {
                    info[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        let inv = spd_inverse(&(&info / n as f64), "logistic information")
            .map_err(|_| Error::DegenerateSam("logistic fit is separated or degenerate".into()))?
            / n as f64;
        let step = &inv * score;
        beta += &step;
        if beta.amax() > 50.0 {
            return Err(Error::DegenerateSam("logistic coefficients diverge (separation)".into()));
        }
        if step.amax() < 1e-10 {
            return Ok((beta, inv));
        }
    }
    Err(Error::DegenerateSam("logistic fit did not converge".into()))
}

/// Bartlett-weighted long-run covariance of the rows of `scores`
/// (n x k), normalised by n. Scores are assumed mean zero.
pub fn bartlett_lrv(scores: &DMatrix<f64>, lag: usize) -> DMatrix<f64> {
    let n = scores.nrows();
    let k = scores.ncols();
    let mut s = DMatrix::zeros(k, k);
    if n == 0 {
        return s;
    }
    let lag = lag.min(n - 1);
    for l in 0..=lag {
        let mut g = DMatrix::zeros(k, k);
        for t in l..n {
            let a = scores.row(t);
            let b = scores.row(t - l);
            for i in 0..k {
                for j in 0..k {
                    g[(i, j)] += a[i] * b[j];
                }
            }
        }
        g /= n as f64;
        if l == 0 {
            s += g;
        } else {
            let w = 1.0 - l as f64 / (lag as f64 + 1.0);
            s += (&g + g.transpose()) * w;
        }
    }
    s
}

/// Scalar Bartlett long-run variance of a mean-zero series.
pub fn bartlett_lrv_scalar(series: &[f64], lag: usize) -> f64 {
    let n = series.len();
    if n == 0 {
        return 0.0;
    }
    let lag = lag.min(n - 1);
    let mut s = series.iter().map(|v| v * v).sum::<f64>() / n as f64;
    for l in 1..=lag {
        let g: f64 = (l..n).map(|t| series[t] * series[t - l]).sum::<f64>() / n as f64;
        s += 2.0 * (1.0 - l as f64 / (lag as f64 + 1.0)) * g;
    }
    s
}

/// Cluster-summed outer product `sum_c g_c g_c'` with the G/(G-1) correction.
pub fn cluster_meat(scores: &DMatrix<f64>, clusters: &[usize]) -> DMatrix<f64> {
    use std::collections::BTreeMap;
    let k = scores.ncols();
    let mut sums: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
    for (i, c) in clusters.iter().enumerate() {
        let e = sums.entry(*c).or_insert_with(|| DVector::zeros(k));
        *e += scores.row(i).transpose();
    }
    let g = sums.len();
    let mut meat = DMatrix::zeros(k, k);
    for v in sums.values() {
        meat += v * v.transpose();
    }
    if g > 1 {
        meat *= g as f64 / (g as f64 - 1.0);
    }
    meat
}

/// Default HAC truncation lag for horizon `h` and `n` rows: `h + ceil(n^{1/3})`.
pub fn default_hac_lag(h: usize, n: usize) -> usize {
    h + (n as f64).cbrt().ceil() as usize
}

/// Spectral (operator 2-) norm.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
}

/// Type-7 sample quantile of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, 0.5)
}
