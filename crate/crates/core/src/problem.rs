//! Seeded synthetic instances: matrix completion (optionally noisy) and lifted
//! phase retrieval, plus signal extraction from a lifted solution.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::linops::{MeasurementOp, Mat, Vector};
use crate::rng::SeededRng;
use crate::serde_mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionInstance {
    pub op: MeasurementOp,
    #[serde(with = "serde_mat::vector")]
    pub b: Vector,
    #[serde(with = "serde_mat::rows")]
    pub x_true: Mat,
    #[serde(with = "serde_mat::rows")]
    pub u_true: Mat,
    pub seed: u64,
    /// Relative noise level applied to `b`, zero when noiseless.
    #[serde(default)]
    pub noise_rel: f64,
}

impl CompletionInstance {
    pub fn rank(&self) -> usize {
        self.u_true.ncols()
    }
}

/// `X♮ = U♮U♮ᵀ` with `U♮` i.i.d. N(0,1) (drawn column by column), then `n`
/// distinct ordered positions uniformly from the `d²` grid.
pub fn gen_completion(d: usize, r_true: usize, n: usize, seed: u64) -> Result<CompletionInstance> {
    if r_true < 1 || r_true > d {
        return arg_err(format!("r_true must be in [1, {d}]"));
    }
    if n < 1 || n > d * d {
        return arg_err(format!("n must be in [1, {}]", d * d));
    }
    let mut rng = SeededRng::new(seed);
    let u_true = Mat::from_fn(d, r_true, |_, _| rng.normal());
    let x_true = crate::linops::symmetrize(&(&u_true * u_true.transpose()));
    let positions = rng.sample_distinct((d * d) as u64, n);
    let op = MeasurementOp::entry_mask(d, positions.iter().map(|&p| (p as usize / d, p as usize % d)).collect())?;
    let b = op.apply(&x_true)?;
    Ok(CompletionInstance { op, b, x_true, u_true, seed, noise_rel: 0.0 })
}

/// `b + ω` with `ω_i` i.i.d. N(0, (sigma_rel·‖b‖)²).
pub fn perturb_noise(b: &Vector, sigma_rel: f64, seed: u64) -> Result<Vector> {
    if !(sigma_rel >= 0.0) {
        return arg_err("sigma_rel must be >= 0");
    }
    if sigma_rel == 0.0 {
        return Ok(b.clone());
    }
    let sigma = sigma_rel * b.norm();
    let mut rng = SeededRng::new(seed);
    Ok(b.map(|v| v + sigma * rng.normal()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseInstance {
    pub op: MeasurementOp,
    #[serde(with = "serde_mat::vector")]
    pub b: Vector,
    #[serde(with = "serde_mat::vector")]
    pub x_signal: Vector,
    pub seed: u64,
}

impl PhaseInstance {
    /// Noiseless measurements `b_i = (a_iᵀx)²` for a rank-one operator.
    pub fn from_parts(op: MeasurementOp, x_signal: Vector, seed: u64) -> Result<Self> {
        if x_signal.len() != op.dim() {
            return arg_err(format!("signal length {} differs from operator dim {}", x_signal.len(), op.dim()));
        }
        let b = op.apply(&(&x_signal * x_signal.transpose()))?;
        Ok(Self { op, b, x_signal, seed })
    }
}

/// `round(oversample·d)` Gaussian sensing vectors (row by row), then, if no
/// signal is given, a Gaussian signal normalized to unit length.
pub fn gen_phase_retrieval(d: usize, oversample: f64, seed: u64, signal: Option<&[f64]>) -> Result<PhaseInstance> {
    if d < 1 {
        return arg_err("d must be >= 1");
    }
    if !(oversample > 0.0) {
        return arg_err("oversample must be > 0");
    }
    let n = ((oversample * d as f64).round() as usize).max(1);
    let mut rng = SeededRng::new(seed);
    let mut a = Mat::zeros(n, d);
    for i in 0..n {
        for k in 0..d {
            a[(i, k)] = rng.normal();
        }
    }
    let x = match signal {
        Some(s) => Vector::from_column_slice(s),
        None => {
            let x = Vector::from_vec(rng.normal_vec(d));
            let nx = x.norm();
            x / nx
        }
    };
    PhaseInstance::from_parts(MeasurementOp::rank_one(a)?, x, seed)
}

/// `√λ_max · v_max` of a symmetric PSD matrix, signed so that the entry of
/// largest magnitude is nonnegative.
pub fn extract_signal(x: &Mat) -> Result<Vector> {
    let eig = SymmetricEigen::new(x.clone());
    let (k, &lmax) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::Argument("empty matrix".into()))?;
    if lmax < -1e-10 * x.norm() {
        return Err(Error::NotPsd(lmax));
    }
    let mut v = eig.eigenvectors.column(k).into_owned() * lmax.max(0.0).sqrt();
    let pivot = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
    if pivot < 0.0 {
        v = -v;
    }
    Ok(v)
}

/// `|⟨a,b⟩|/(‖a‖‖b‖)`, zero if either vector vanishes.
pub fn correlation(a: &Vector, b: &Vector) -> f64 {
    let den = a.norm() * b.norm();
    if den == 0.0 {
        0.0
    } else {
        a.dot(b).abs() / den
    }
}

/// `‖X − X♮‖_F / ‖X♮‖_F`.
pub fn relative_error(x: &Mat, x_true: &Mat) -> f64 {
    (x - x_true).norm() / x_true.norm()
}

/// Largest eigenvalue of `A*A` on symmetric matrices by power iteration,
/// i.e. the Lipschitz constant of `∇f` for `f = ½‖A(X) − b‖²`.
pub fn estimate_smoothness(op: &MeasurementOp, iters: usize, seed: u64) -> Result<f64> {
    let d = op.dim();
    let mut rng = SeededRng::new(seed);
    let mut z = crate::linops::symmetrize(&Mat::from_fn(d, d, |_, _| rng.normal()));
    z /= z.norm();
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let w = op.adjoint(&op.apply(&z)?)?;
        let next = z.dot(&w);
        let nw = w.norm();
        if nw == 0.0 {
            return Ok(0.0);
        }
        z = w / nw;
        if (next - est).abs() <= 1e-12 * next.abs() {
            return Ok(next);
        }
        est = next;
    }
    Ok(est)
}

/// Grayscale matrix from CSV text, flattened row-major. A first line that
/// does not parse as numbers is taken as a header.
pub fn load_signal_csv(text: &str) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut width = None;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        let vals: std::result::Result<Vec<f64>, _> = rec.iter().filter(|c| !c.is_empty()).map(str::parse::<f64>).collect();
        match vals {
            Ok(v) if v.is_empty() => continue,
            Ok(v) => {
                if *width.get_or_insert(v.len()) != v.len() {
                    return Err(Error::Parse(format!("row {} has {} values, expected {}", line + 1, v.len(), width.unwrap())));
                }
                out.extend(v);
            }
            Err(_) if line == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("row {}: {e}", line + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::Parse("signal file holds no values".into()));
    }
    Ok(out)
}
