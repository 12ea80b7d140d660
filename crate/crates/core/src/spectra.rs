//! Singular spectra, numerical rank, column norms and the stationarity report
//! for projected UDU iterates.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::linops::Mat;
use crate::solver::FactorState;

/// Full singular spectrum, descending.
pub fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { iter: None, what: "matrix entry".into() });
    }
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let svd = m
        .clone()
        .try_svd_unordered(false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Argument("svd did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().map(|v| v.abs()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Count of `σ_i > rel_tol·σ_1`; zero for an all-zero spectrum.
pub fn numerical_rank(svals: &[f64], rel_tol: f64) -> Result<usize> {
    if svals.windows(2).any(|w| w[1] > w[0]) || svals.iter().any(|&s| s < 0.0 || s.is_nan()) {
        return arg_err("singular values must be nonnegative and sorted descending");
    }
    let Some(&top) = svals.first() else { return Ok(0) };
    if top == 0.0 {
        return Ok(0);
    }
    Ok(svals.iter().filter(|&&s| s > rel_tol * top).count())
}

/// `σ_{k+1}/σ_1` with `k` zero-based, i.e. `ratio(s, 2)` is σ_3/σ_1.
pub fn ratio(svals: &[f64], k: usize) -> f64 {
    match (svals.first(), svals.get(k)) {
        (Some(&top), Some(&s)) if top > 0.0 => s / top,
        _ => 0.0,
    }
}

pub fn column_norms(u: &Mat) -> Vec<f64> {
    u.column_iter().map(|c| c.norm()).collect()
}

/// Residuals of the stationarity conditions of one projected UDU step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    /// `max_j ‖G u_j λ_j‖`.
    pub cond_a_resid: f64,
    /// `max(0, −u_jᵀ G u_j)` over columns with zero weight.
    pub cond_c_viol: f64,
    /// `|u_jᵀ G u_j|` over columns with positive weight.
    pub cond_d_resid: f64,
    /// Frobenius norm of the factor before projection.
    pub ubar_norm: f64,
    pub alpha: f64,
    /// Multiplier of an active ball constraint, zero when inactive.
    pub beta: f64,
}

impl FixedPointReport {
    /// All three residuals at most `tol_rel·‖G‖_F` (conditions a, d) and
    /// `tol_abs` (condition c).
    pub fn certified(&self, g_norm: f64, tol_rel: f64, tol_abs: f64) -> bool {
        self.cond_a_resid <= tol_rel * g_norm && self.cond_d_resid <= tol_rel * g_norm && self.cond_c_viol <= tol_abs
    }
}

/// Weights at or below this fraction of the largest count as zero.
pub const ZERO_WEIGHT_REL: f64 = 1e-12;

pub fn fixed_point_report(state: &FactorState, g: &Mat, eta: f64) -> Result<FixedPointReport> {
    let d = state.u.nrows();
    if g.nrows() != d || g.ncols() != d {
        return dim_err(format!("gradient is {}x{}, factor has {d} rows", g.nrows(), g.ncols()));
    }
    if state.lambda.len() != state.u.ncols() {
        return dim_err("weight count differs from factor columns");
    }
    if eta <= 0.0 {
        return arg_err("eta must be > 0");
    }
    Ok(report_from_gu(state, &(g * &state.u), eta))
}

/// Same as [`fixed_point_report`] given the product `G·U`.
pub(crate) fn report_from_gu(state: &FactorState, gu: &Mat, eta: f64) -> FixedPointReport {
    let lam = &state.lambda;
    let lmax = lam.iter().copied().fold(0.0, f64::max);
    let zero_cut = ZERO_WEIGHT_REL * lmax;
    let (mut a, mut c, mut dd) = (0.0f64, 0.0f64, 0.0f64);
    let mut ubar = state.u.clone();
    for j in 0..state.u.ncols() {
        let gj = gu.column(j);
        a = a.max(gj.norm() * lam[j].abs());
        let q = state.u.column(j).dot(&gj);
        if lam[j] <= zero_cut {
            c = c.max((-q).max(0.0));
        } else {
            dd = dd.max(q.abs());
        }
        ubar.column_mut(j).axpy(-2.0 * eta * lam[j], &gj, 1.0);
    }
    let ubar_norm = ubar.norm();
    let alpha = state.alpha;
    let beta = if ubar_norm > alpha { (ubar_norm - alpha) / (2.0 * alpha * eta) } else { 0.0 };
    FixedPointReport { cond_a_resid: a, cond_c_viol: c, cond_d_resid: dd, ubar_norm, alpha, beta }
}

/// Columns carrying mass, and how close to orthogonal they are.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveColumns {
    /// Indices with norm above `rel·max norm`.
    pub indices: Vec<usize>,
    /// Largest `|⟨u_i,u_j⟩|/(‖u_i‖‖u_j‖)` over active pairs.
    pub max_cosine: f64,
}

pub fn active_columns(u: &Mat, rel: f64) -> ActiveColumns {
    let norms = column_norms(u);
    let top = norms.iter().copied().fold(0.0, f64::max);
    let indices: Vec<usize> = (0..norms.len()).filter(|&j| top > 0.0 && norms[j] > rel * top).collect();
    let mut max_cosine = 0.0f64;
    for (p, &i) in indices.iter().enumerate() {
        for &j in &indices[p + 1..] {
            let cos = u.column(i).dot(&u.column(j)).abs() / (norms[i] * norms[j]);
            max_cosine = max_cosine.max(cos);
        }
    }
    ActiveColumns { indices, max_cosine }
}

/// One value per line under a `sigma` header.
pub fn spectrum_csv(svals: &[f64]) -> String {
    let mut s = String::from("sigma\n");
    for v in svals {
        s.push_str(&format!("{v:e}\n"));
    }
    s
}
