//! Gradient solvers for `min ½‖A(X) − b‖²` over factored PSD matrices.
//!
//! * BM: `X = UUᵀ`, plain gradient descent on `U`.
//! * UDU: `X = U diag(λ) Uᵀ` with `‖U‖_F ≤ α`, `λ ≥ 0`, simultaneous
//!   projected gradient steps on `U` and `λ`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::linops::{MeasurementOp, Mat, Vector};
use crate::rng::SeededRng;
use crate::spectra::{self, FixedPointReport};

/// Solver iterate. For BM runs `lambda` is all ones and `alpha` is infinite.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorState {
    pub u: Mat,
    pub lambda: Vector,
    pub alpha: f64,
}

impl FactorState {
    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// `‖U‖_F ≤ α + slack` and every weight nonnegative.
    pub fn is_feasible(&self, slack: f64) -> bool {
        self.u.norm() <= self.alpha + slack && self.lambda.iter().all(|&l| l >= 0.0)
    }

    pub fn to_dump(&self) -> StateDump {
        StateDump {
            d: self.dim(),
            r: self.rank(),
            alpha: self.alpha.is_finite().then_some(self.alpha),
            lambda: self.lambda.iter().copied().collect(),
            u: self.u.transpose().iter().copied().collect(),
            scale: 1.0,
        }
    }
}

/// JSON form of a [`FactorState`]; `u` is row-major, `alpha` is null for BM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateDump {
    pub d: usize,
    pub r: usize,
    pub alpha: Option<f64>,
    pub lambda: Vec<f64>,
    pub u: Vec<f64>,
    /// Measurement scale of the run; the stored matrix is `scale·U diag(λ) Uᵀ`.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<StateDump> for FactorState {
    type Error = Error;

    fn try_from(s: StateDump) -> Result<Self> {
        if s.u.len() != s.d * s.r || s.lambda.len() != s.r {
            return dim_err(format!("state dump header says {}x{} but holds {} entries and {} weights", s.d, s.r, s.u.len(), s.lambda.len()));
        }
        Ok(FactorState {
            u: Mat::from_row_slice(s.d, s.r, &s.u),
            lambda: Vector::from_vec(s.lambda),
            alpha: s.alpha.unwrap_or(f64::INFINITY),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Bm,
    Udu,
}

/// Preprocessing of the measurement vector. The solver iterates on `b/s` and
/// reports `X = s·U diag(λ) Uᵀ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementScaling {
    None,
    /// `s = max_i |b_i|`.
    MaxAbs,
    Fixed(f64),
}

impl MeasurementScaling {
    pub fn factor(&self, b: &Vector) -> f64 {
        let s = match *self {
            MeasurementScaling::None => 1.0,
            MeasurementScaling::MaxAbs => b.amax(),
            MeasurementScaling::Fixed(s) => s,
        };
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub solver: SolverKind,
    pub eta: f64,
    pub iters: usize,
    /// Frobenius norm of the initial factor.
    pub init_scale: f64,
    pub seed: u64,
    pub log_every: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Initial weights; `None` means all ones.
    pub d0: Option<Vec<f64>>,
    pub scaling: MeasurementScaling,
    /// Singular values kept per trace record.
    pub top_k: usize,
}

impl SolverConfig {
    pub fn new(solver: SolverKind, rank: usize, eta: f64, iters: usize, init_scale: f64, seed: u64) -> Self {
        Self {
            solver,
            eta,
            iters,
            init_scale,
            seed,
            log_every: 1000,
            rank,
            alpha: 1.0,
            d0: None,
            scaling: MeasurementScaling::None,
            top_k: 10,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            errs.push("eta must be > 0".to_string());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            errs.push("init_scale must be > 0".to_string());
        }
        if !(self.alpha > 0.0) {
            errs.push("alpha must be > 0".to_string());
        }
        if self.rank < 1 || self.rank > dim {
            errs.push(format!("rank must be in [1, {dim}]"));
        }
        if self.log_every < 1 {
            errs.push("log_every must be >= 1".to_string());
        }
        if let Some(d0) = &self.d0 {
            if d0.len() != self.rank {
                errs.push(format!("d0 has {} entries, rank is {}", d0.len(), self.rank));
            }
            if d0.iter().any(|&v| !(v >= 0.0)) {
                errs.push("d0 entries must be >= 0".to_string());
            }
        }
        if let MeasurementScaling::Fixed(s) = self.scaling {
            if !(s > 0.0 && s.is_finite()) {
                errs.push("fixed measurement scale must be > 0".to_string());
            }
        }
        match errs.len() {
            0 => Ok(()),
            1 => Err(Error::Argument(errs.remove(0))),
            _ => Err(Error::Spec(errs)),
        }
    }
}

/// Returns `M` if `‖M‖_F ≤ α`, else `(α/‖M‖_F)·M`.
pub fn project_fro_ball(m: &Mat, alpha: f64) -> Result<Mat> {
    if !(alpha > 0.0) {
        return arg_err("alpha must be > 0");
    }
    let mut out = m.clone();
    fro_ball_in_place(&mut out, alpha);
    Ok(out)
}

pub(crate) fn fro_ball_in_place(m: &mut Mat, alpha: f64) {
    let n = m.norm();
    if n > alpha {
        *m *= alpha / n;
        // Rounding can leave the norm an ulp above alpha; the result must be
        // a fixed point of the projection.
        while m.norm() > alpha {
            *m *= 1.0 - f64::EPSILON;
        }
    }
}

/// Elementwise `max(v_j, 0)`.
pub fn project_diag_nonneg(v: &Vector) -> Vector {
    v.map(|x| x.max(0.0))
}

fn check_step(u: &Mat, g: &Mat) -> Result<()> {
    let d = u.nrows();
    if g.nrows() != d || g.ncols() != d {
        return dim_err(format!("gradient is {}x{}, factor has {d} rows", g.nrows(), g.ncols()));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { iter: None, what: "gradient".into() });
    }
    Ok(())
}

/// `U − 2η·G·U`.
pub fn bm_step(u: &Mat, g: &Mat, eta: f64) -> Result<Mat> {
    check_step(u, g)?;
    Ok(u - (g * u) * (2.0 * eta))
}

/// One simultaneous projected step from `G = ∇f(X)`.
pub fn udu_step(state: &FactorState, g: &Mat, eta: f64) -> Result<FactorState> {
    check_step(&state.u, g)?;
    if state.lambda.len() != state.u.ncols() {
        return dim_err("weight count differs from factor columns");
    }
    let mut next = state.clone();
    udu_step_gu(&mut next, &(g * &state.u), eta);
    Ok(next)
}

/// In-place step given `G·U`. Both updates read the pre-step factor.
pub(crate) fn udu_step_gu(state: &mut FactorState, gu: &Mat, eta: f64) {
    for j in 0..state.u.ncols() {
        let gj = gu.column(j);
        let lj = state.lambda[j];
        let curv = state.u.column(j).dot(&gj);
        state.u.column_mut(j).axpy(-2.0 * eta * lj, &gj, 1.0);
        state.lambda[j] = (lj - eta * curv).max(0.0);
    }
    fro_ball_in_place(&mut state.u, state.alpha);
}

/// `U diag(λ) Uᵀ`, symmetrized.
pub fn reconstruct(state: &FactorState) -> Mat {
    let mut ul = state.u.clone();
    for (mut c, &l) in ul.column_iter_mut().zip(state.lambda.iter()) {
        c *= l;
    }
    crate::linops::symmetrize(&(ul * state.u.transpose()))
}

/// Initial factor: i.i.d. N(0,1) entries drawn column by column, rescaled to
/// Frobenius norm `init_scale`.
pub fn init_factor(dim: usize, rank: usize, init_scale: f64, seed: u64) -> Mat {
    let mut rng = SeededRng::new(seed);
    let mut u = Mat::from_fn(dim, rank, |_, _| rng.normal());
    let n = u.norm();
    if n > 0.0 {
        u *= init_scale / n;
    }
    u
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iter: usize,
    /// Objective in the units of the caller's `b`.
    pub objective: f64,
    /// Leading singular values of the reconstruction `X`.
    pub svals: Vec<f64>,
    /// Leading singular values of the factor `U`.
    pub u_svals: Vec<f64>,
    pub colnorm_max: f64,
    pub colnorm_min: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// Ball multiplier of the step taken from this iterate (UDU only).
    pub beta: f64,
    /// Objective grew more than tenfold since the previous record.
    pub warning: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Completed,
    /// Stopped because the gradient became non-finite at this iteration.
    NonFinite { iter: usize },
}

#[derive(Clone, Debug)]
pub struct SolverOutput {
    /// Final iterate in solver units; `X = scale · reconstruct(state)`.
    pub state: FactorState,
    pub scale: f64,
    pub trace: Vec<TraceRecord>,
    pub status: RunStatus,
    /// Any divergence warning or a non-finite stop.
    pub diverged: bool,
    /// `‖U_k − U_{k−1}‖_F + ‖λ_k − λ_{k−1}‖` of the last step taken.
    pub last_displacement: f64,
    pub iters_run: usize,
}

impl SolverOutput {
    pub fn x(&self) -> Mat {
        reconstruct(&self.state) * self.scale
    }

    /// Displacement below `1e-12`.
    pub fn converged(&self) -> bool {
        self.iters_run > 0 && self.last_displacement < CONVERGED_DISPLACEMENT
    }
}

pub const CONVERGED_DISPLACEMENT: f64 = 1e-12;

/// Gradient and stationarity report at the final iterate, in solver units.
pub fn final_report(op: &MeasurementOp, b: &Vector, out: &SolverOutput, eta: f64) -> Result<(Mat, FixedPointReport)> {
    let bs = b / out.scale;
    let g = crate::linops::grad_x(op, &reconstruct(&out.state), &bs)?;
    let rep = spectra::fixed_point_report(&out.state, &g, eta)?;
    Ok((g, rep))
}

fn record(
    op: &MeasurementOp,
    bs: &Vector,
    st: &FactorState,
    scale: f64,
    cfg: &SolverConfig,
    iter: usize,
    prev: Option<f64>,
) -> Result<TraceRecord> {
    let (resid, gu) = op.factored_gradient(&st.u, st.lambda.as_slice(), bs)?;
    let objective = 0.5 * resid.norm_squared() * scale * scale;
    let x = reconstruct(st);
    let finite = x.iter().chain(st.u.iter()).all(|v| v.is_finite());
    let (svals, u_svals) = if finite {
        let mut s = spectra::singular_values(&x)?;
        s.iter_mut().for_each(|v| *v *= scale);
        s.truncate(cfg.top_k);
        let mut us = spectra::singular_values(&st.u)?;
        us.truncate(cfg.top_k);
        (s, us)
    } else {
        (vec![f64::NAN; cfg.top_k.min(st.dim())], vec![f64::NAN; cfg.top_k.min(st.rank())])
    };
    let norms = spectra::column_norms(&st.u);
    let beta = if cfg.solver == SolverKind::Udu && gu.iter().all(|v| v.is_finite()) {
        spectra::report_from_gu(st, &gu, cfg.eta).beta
    } else {
        0.0
    };
    let warning = match prev {
        Some(p) => p > 0.0 && !(objective <= 10.0 * p),
        None => false,
    };
    Ok(TraceRecord {
        iter,
        objective,
        svals,
        u_svals,
        colnorm_max: norms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        colnorm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
        lambda_max: st.lambda.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        lambda_min: st.lambda.iter().copied().fold(f64::INFINITY, f64::min),
        beta,
        warning,
    })
}

/// Runs the configured solver for the full budget.
///
/// A non-finite gradient stops the run early with [`RunStatus::NonFinite`];
/// the partial trace is kept.
pub fn run_solver(op: &MeasurementOp, b: &Vector, cfg: &SolverConfig) -> Result<SolverOutput> {
    cfg.validate(op.dim())?;
    if b.len() != op.len() {
        return dim_err(format!("measurement vector has length {}, operator has {}", b.len(), op.len()));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return arg_err("measurement vector has non-finite entries");
    }
    let scale = cfg.scaling.factor(b);
    let bs = b / scale;
    let u = init_factor(op.dim(), cfg.rank, cfg.init_scale, cfg.seed);
    let mut st = match cfg.solver {
        SolverKind::Bm => FactorState { u, lambda: Vector::from_element(cfg.rank, 1.0), alpha: f64::INFINITY },
        SolverKind::Udu => FactorState {
            u,
            lambda: cfg.d0.as_ref().map(|v| Vector::from_column_slice(v)).unwrap_or_else(|| Vector::from_element(cfg.rank, 1.0)),
            alpha: cfg.alpha,
        },
    };

    let mut trace = vec![record(op, &bs, &st, scale, cfg, 0, None)?];
    let mut status = RunStatus::Completed;
    let mut last_displacement = f64::INFINITY;
    let mut iters_run = 0;
    let mut prev_u = st.u.clone();
    let mut prev_l = st.lambda.clone();
    for k in 0..cfg.iters {
        let (_, gu) = op.factored_gradient(&st.u, st.lambda.as_slice(), &bs)?;
        if gu.iter().any(|v| !v.is_finite()) {
            status = RunStatus::NonFinite { iter: k };
            break;
        }
        prev_u.copy_from(&st.u);
        prev_l.copy_from(&st.lambda);
        match cfg.solver {
            SolverKind::Bm => st.u -= gu * (2.0 * cfg.eta),
            SolverKind::Udu => {
                udu_step_gu(&mut st, &gu, cfg.eta);
                debug_assert!(st.is_feasible(1e-12), "constraint violated at iteration {k}");
            }
        }
        iters_run = k + 1;
        let done = iters_run == cfg.iters;
        if done || iters_run % cfg.log_every == 0 {
            last_displacement = (&st.u - &prev_u).norm() + (&st.lambda - &prev_l).norm();
            if cfg.solver == SolverKind::Udu {
                assert!(st.is_feasible(1e-12), "constraint violated at iteration {k}");
            }
            let prev = trace.last().map(|r| r.objective);
            trace.push(record(op, &bs, &st, scale, cfg, iters_run, prev)?);
        }
    }
    let diverged = status != RunStatus::Completed || trace.iter().any(|r| r.warning);
    Ok(SolverOutput { state: st, scale, trace, status, diverged, last_displacement, iters_run })
}

/// Trace as CSV. `k` fixes the number of `sv_`/`usv_` columns; missing
/// values are left empty.
pub fn trace_csv(trace: &[TraceRecord], k: usize) -> String {
    let mut s = String::from("iter,objective");
    for i in 1..=k {
        s.push_str(&format!(",sv_{i}"));
    }
    s.push_str(",colnorm_max,colnorm_min,lambda_max,lambda_min");
    for i in 1..=k {
        s.push_str(&format!(",usv_{i}"));
    }
    s.push_str(",beta,warning\n");
    let cell = |v: Option<&f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in trace {
        s.push_str(&format!("{},{:e}", r.iter, r.objective));
        for i in 0..k {
            s.push(',');
            s.push_str(&cell(r.svals.get(i)));
        }
        s.push_str(&format!(",{:e},{:e},{:e},{:e}", r.colnorm_max, r.colnorm_min, r.lambda_max, r.lambda_min));
        for i in 0..k {
            s.push(',');
            s.push_str(&cell(r.u_svals.get(i)));
        }
        s.push_str(&format!(",{:e},{}\n", r.beta, r.warning as u8));
    }
    s
}
