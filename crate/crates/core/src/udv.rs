//! Three-layer linear network `φ(x) = V diag(w) Uᵀ x` with norm-constrained
//! layers, mini-batch training with momentum, and SVD pruning of the hidden
//! layer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::linops::{Mat, Vector};
use crate::rng::SeededRng;
use crate::serde_mat;
use crate::solver::fro_ball_in_place;
use crate::spectra;

/// Constraint set applied after every optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// `‖U‖_F ≤ 1`, `‖V‖_F ≤ 1`, `w ≥ 0`.
    #[serde(rename = "udv")]
    Udv,
    /// `‖U‖_F ≤ 1`, `‖V‖_F ≤ 1`.
    #[serde(rename = "udv_s")]
    UdvS,
    /// `‖u_j‖ ≤ 1`, `‖v_j‖ ≤ 1`, `w ≥ 0`.
    #[serde(rename = "udv_v1")]
    UdvV1,
    /// `‖u_j‖ ≤ 1`, `‖v_j‖ ≤ 1`.
    #[serde(rename = "udv_v2")]
    UdvV2,
    /// Two-layer `V Uᵀ`; `w` stays at ones and is not trained.
    #[serde(rename = "uv")]
    Uv,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Udv, Variant::UdvS, Variant::UdvV1, Variant::UdvV2, Variant::Uv];

    pub fn trains_weights(self) -> bool {
        self != Variant::Uv
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Udv => "udv",
            Variant::UdvS => "udv_s",
            Variant::UdvV1 => "udv_v1",
            Variant::UdvV2 => "udv_v2",
            Variant::Uv => "uv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UdvParams {
    /// `d×m`, columns `u_j`.
    #[serde(with = "serde_mat::rows")]
    pub u: Mat,
    /// Hidden weights, length `m`.
    #[serde(with = "serde_mat::vector")]
    pub w: Vector,
    /// `c×m`, columns `v_j`.
    #[serde(with = "serde_mat::rows")]
    pub v: Mat,
    pub variant: Variant,
}

impl UdvParams {
    pub fn input_dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.v.nrows()
    }

    pub fn width(&self) -> usize {
        self.u.ncols()
    }

    /// `U diag(w)`, the layer whose spectrum is reported.
    pub fn scaled_input_layer(&self) -> Mat {
        scale_columns(&self.u, &self.w)
    }

    /// The end-to-end linear map `V diag(w) Uᵀ` (`c×d`).
    pub fn product(&self) -> Mat {
        scale_columns(&self.v, &self.w) * self.u.transpose()
    }

    fn check(&self) -> Result<()> {
        let m = self.width();
        if self.w.len() != m || self.v.ncols() != m {
            return dim_err(format!("hidden widths disagree: U has {m}, w has {}, V has {}", self.w.len(), self.v.ncols()));
        }
        Ok(())
    }

    /// Largest amount by which the variant's constraints are exceeded.
    pub fn violation(&self) -> f64 {
        let over = |n: f64| (n - 1.0).max(0.0);
        let mut worst = 0.0f64;
        match self.variant {
            Variant::Udv | Variant::UdvS => {
                worst = worst.max(over(self.u.norm())).max(over(self.v.norm()));
            }
            Variant::UdvV1 | Variant::UdvV2 => {
                for n in spectra::column_norms(&self.u).into_iter().chain(spectra::column_norms(&self.v)) {
                    worst = worst.max(over(n));
                }
            }
            Variant::Uv => {}
        }
        if matches!(self.variant, Variant::Udv | Variant::UdvV1) {
            worst = worst.max(self.w.iter().fold(0.0f64, |m, &x| m.max(-x)));
        }
        worst
    }
}

fn scale_columns(m: &Mat, w: &Vector) -> Mat {
    let mut out = m.clone();
    for (mut c, &s) in out.column_iter_mut().zip(w.iter()) {
        c *= s;
    }
    out
}

/// `V diag(w) Uᵀ x`.
pub fn forward(params: &UdvParams, x: &Vector) -> Result<Vector> {
    params.check()?;
    if x.len() != params.input_dim() {
        return dim_err(format!("input has length {}, network expects {}", x.len(), params.input_dim()));
    }
    let h = params.u.tr_mul(x).component_mul(&params.w);
    Ok(&params.v * h)
}

/// Row-wise predictions for an `n×d` input block.
pub fn predict(params: &UdvParams, xb: &Mat) -> Result<Mat> {
    params.check()?;
    if xb.ncols() != params.input_dim() {
        return dim_err(format!("inputs have {} features, network expects {}", xb.ncols(), params.input_dim()));
    }
    Ok(scale_columns(&(xb * &params.u), &params.w) * params.v.transpose())
}

fn check_batch(params: &UdvParams, xb: &Mat, yb: &Mat) -> Result<()> {
    if xb.nrows() == 0 {
        return arg_err("empty batch");
    }
    if yb.nrows() != xb.nrows() || yb.ncols() != params.output_dim() {
        return dim_err(format!(
            "targets are {}x{}, expected {}x{}",
            yb.nrows(),
            yb.ncols(),
            xb.nrows(),
            params.output_dim()
        ));
    }
    Ok(())
}

/// Batch mean of `½‖φ(x_i) − y_i‖²`.
pub fn batch_loss(params: &UdvParams, xb: &Mat, yb: &Mat) -> Result<f64> {
    check_batch(params, xb, yb)?;
    let r = predict(params, xb)? - yb;
    Ok(0.5 * r.norm_squared() / xb.nrows() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub du: Mat,
    pub dw: Vector,
    pub dv: Mat,
}

/// Gradients of [`batch_loss`] with respect to `U`, `w` and `V`. For the UV
/// variant `dw` is still the mathematical gradient; training ignores it.
pub fn param_grads(params: &UdvParams, xb: &Mat, yb: &Mat) -> Result<Grads> {
    check_batch(params, xb, yb)?;
    params.check()?;
    if xb.ncols() != params.input_dim() {
        return dim_err(format!("inputs have {} features, network expects {}", xb.ncols(), params.input_dim()));
    }
    let inv_b = 1.0 / xb.nrows() as f64;
    let p = xb * &params.u;
    let h = scale_columns(&p, &params.w);
    let r = &h * params.v.transpose() - yb;
    let rv = &r * &params.v;
    let dv = r.tr_mul(&h) * inv_b;
    let du = xb.tr_mul(&scale_columns(&rv, &params.w)) * inv_b;
    let dw = Vector::from_fn(params.width(), |j, _| rv.column(j).dot(&p.column(j)) * inv_b);
    Ok(Grads { du, dw, dv })
}

/// Projects onto the variant's constraint set.
pub fn apply_constraints(params: &UdvParams, variant: Variant) -> UdvParams {
    let mut p = params.clone();
    p.variant = variant;
    constrain_in_place(&mut p);
    p
}

fn constrain_in_place(p: &mut UdvParams) {
    match p.variant {
        Variant::Udv | Variant::UdvS => {
            fro_ball_in_place(&mut p.u, 1.0);
            fro_ball_in_place(&mut p.v, 1.0);
        }
        Variant::UdvV1 | Variant::UdvV2 => {
            for m in [&mut p.u, &mut p.v] {
                for mut c in m.column_iter_mut() {
                    let n = c.norm();
                    if n > 1.0 {
                        c /= n;
                        while c.norm() > 1.0 {
                            c *= 1.0 - f64::EPSILON;
                        }
                    }
                }
            }
        }
        Variant::Uv => {}
    }
    if matches!(p.variant, Variant::Udv | Variant::UdvV1) {
        p.w.apply(|x| *x = x.max(0.0));
    }
}

/// Hidden width `round(√((c+2)d) + 2√(d/(c+2)))` for `d` inputs and `c`
/// outputs.
pub fn hidden_width(d: usize, c: usize) -> usize {
    let (d, c) = (d as f64, c as f64);
    (((c + 2.0) * d).sqrt() + 2.0 * (d / (c + 2.0)).sqrt()).round() as usize
}

/// Truncated-normal `U`, `V` (column by column, `U` first) and `w = 1`.
pub fn init_params(d: usize, c: usize, m: usize, std: f64, variant: Variant, rng: &mut SeededRng) -> UdvParams {
    let u = Mat::from_fn(d, m, |_, _| rng.truncated_normal(std, 2.0));
    let v = Mat::from_fn(c, m, |_, _| rng.truncated_normal(std, 2.0));
    UdvParams { u, w: Vector::from_element(m, 1.0), v, variant }
}

/// Inputs `X`, targets `Y` and an 80/20-style split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    #[serde(with = "serde_mat::rows")]
    pub x: Mat,
    #[serde(with = "serde_mat::rows")]
    pub y: Mat,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Rank of the generating map, if synthetic.
    pub r_gen: Option<usize>,
    pub noise: f64,
}

impl RegressionDataset {
    pub fn new(x: Mat, y: Mat, train_frac: f64, seed: u64) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return dim_err(format!("{} inputs but {} targets", x.nrows(), y.nrows()));
        }
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return arg_err("train fraction must be in (0, 1)");
        }
        let n = x.nrows();
        let mut idx: Vec<usize> = (0..n).collect();
        SeededRng::derive(seed, 2).shuffle(&mut idx);
        let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let test = idx.split_off(n_train);
        Ok(Self { x, y, train: idx, test, r_gen: None, noise: 0.0 })
    }

    pub fn rows(&self, idx: &[usize]) -> (Mat, Mat) {
        (self.x.select_rows(idx), self.y.select_rows(idx))
    }

    /// CSV with header `x1..xd,y1..yc` and one sample per row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<String> =
            (1..=self.x.ncols()).map(|i| format!("x{i}")).chain((1..=self.y.ncols()).map(|i| format!("y{i}"))).collect();
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.x.nrows() {
            let row: Vec<String> = self.x.row(i).iter().chain(self.y.row(i).iter()).map(|v| format!("{v:e}")).collect();
            w.write_record(&row).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Parse(e.to_string()))?).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads a CSV written by [`to_csv`](Self::to_csv); columns whose header
    /// starts with `y` are targets.
    pub fn from_csv(text: &str, train_frac: f64, seed: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().map_err(csv_err)?.clone();
        let is_target: Vec<bool> = header.iter().map(|h| h.trim().starts_with('y')).collect();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            for (cell, &t) in rec.iter().zip(&is_target) {
                let v: f64 = cell.trim().parse().map_err(|e| Error::Parse(format!("{cell:?}: {e}")))?;
                if t { ys.push(v) } else { xs.push(v) }
            }
        }
        let c = is_target.iter().filter(|&&t| t).count();
        let d = is_target.len() - c;
        if c == 0 || d == 0 {
            return Err(Error::Parse("dataset needs x and y columns".into()));
        }
        let n = xs.len() / d;
        Self::new(Mat::from_row_slice(n, d, &xs), Mat::from_row_slice(n, c, &ys), train_frac, seed)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// `Y = X·W♮ + noise·E` with `X`, `E` standard normal and `W♮ = gain·ABᵀ`,
/// `A` (`d×r`) entries N(0, 1/d), `B` (`c×r`) entries N(0, 1).
pub fn gen_regression(n: usize, d: usize, c: usize, r_gen: usize, noise: f64, gain: f64, seed: u64) -> Result<RegressionDataset> {
    if r_gen < 1 || r_gen > d.min(c) {
        return arg_err(format!("generator rank must be in [1, {}]", d.min(c)));
    }
    if n < 2 {
        return arg_err("need at least two samples");
    }
    let mut rng = SeededRng::new(seed);
    let sd = 1.0 / (d as f64).sqrt();
    let a = Mat::from_fn(d, r_gen, |_, _| sd * rng.normal());
    let b = Mat::from_fn(c, r_gen, |_, _| rng.normal());
    let w_true = (a * b.transpose()) * gain;
    let x = Mat::from_fn(n, d, |_, _| rng.normal());
    let e = Mat::from_fn(n, c, |_, _| rng.normal());
    let y = &x * w_true + e * noise;
    let mut ds = RegressionDataset::new(x, y, 0.8, seed)?;
    ds.r_gen = Some(r_gen);
    ds.noise = noise;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// `0` gives plain mini-batch gradient descent.
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub variant: Variant,
    pub hidden: usize,
    pub init_std: f64,
    /// Singular values kept per epoch record.
    pub top_k: usize,
}

impl TrainConfig {
    pub fn new(variant: Variant, hidden: usize, lr: f64, momentum: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self { lr, momentum, batch_size, epochs, seed, variant, hidden, init_std: 0.02, top_k: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push("lr must be > 0".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push("momentum must be in [0, 1)".to_string());
        }
        if self.batch_size < 1 {
            errs.push("batch_size must be >= 1".to_string());
        }
        if self.hidden < 1 {
            errs.push("hidden width must be >= 1".to_string());
        }
        if !(self.init_std > 0.0) {
            errs.push("init_std must be > 0".to_string());
        }
        match errs.len() {
            0 => Ok(()),
            1 => Err(Error::Argument(errs.remove(0))),
            _ => Err(Error::Spec(errs)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    /// Leading singular values of `U diag(w)`.
    pub svals: Vec<f64>,
    pub violation: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: UdvParams,
    pub trace: Vec<EpochRecord>,
    pub diverged: bool,
}

impl TrainOutput {
    /// Mean test loss over the last `k` epochs (at least one).
    pub fn test_loss_last(&self, k: usize) -> f64 {
        let k = k.max(1).min(self.trace.len());
        self.trace[self.trace.len() - k..].iter().map(|r| r.test_loss).sum::<f64>() / k as f64
    }
}

fn epoch_record(p: &UdvParams, ds: &RegressionDataset, xtr: &Mat, ytr: &Mat, epoch: usize, k: usize) -> Result<EpochRecord> {
    let train_loss = batch_loss(p, xtr, ytr)?;
    let test_loss = if ds.test.is_empty() {
        f64::NAN
    } else {
        let (xte, yte) = ds.rows(&ds.test);
        batch_loss(p, &xte, &yte)?
    };
    let layer = p.scaled_input_layer();
    let mut svals = if layer.iter().all(|v| v.is_finite()) { spectra::singular_values(&layer)? } else { Vec::new() };
    svals.truncate(k);
    Ok(EpochRecord { epoch, train_loss, test_loss, svals, violation: p.violation() })
}

/// Shuffled mini-batch training with momentum `b ← μb + g`, `p ← p − lr·b`
/// and projection after every step. Stops early, flagged as diverged, if the
/// training loss becomes non-finite.
pub fn train(ds: &RegressionDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return arg_err("training split is empty");
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut p = init_params(ds.x.ncols(), ds.y.ncols(), cfg.hidden, cfg.init_std, cfg.variant, &mut rng);
    constrain_in_place(&mut p);
    train_from(ds, cfg, p, &mut rng)
}

/// Continues training from given parameters.
pub fn train_from(ds: &RegressionDataset, cfg: &TrainConfig, mut p: UdvParams, rng: &mut SeededRng) -> Result<TrainOutput> {
    let (xtr, ytr) = ds.rows(&ds.train);
    let mut trace = vec![epoch_record(&p, ds, &xtr, &ytr, 0, cfg.top_k)?];
    let (mut bu, mut bw, mut bv) = (Mat::zeros(p.u.nrows(), p.width()), Vector::zeros(p.width()), Mat::zeros(p.v.nrows(), p.width()));
    let mut order = ds.train.clone();
    let mut diverged = false;
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let (xb, yb) = ds.rows(batch);
            let g = param_grads(&p, &xb, &yb)?;
            bu = &bu * cfg.momentum + g.du;
            bv = &bv * cfg.momentum + g.dv;
            p.u -= &bu * cfg.lr;
            p.v -= &bv * cfg.lr;
            if p.variant.trains_weights() {
                bw = &bw * cfg.momentum + g.dw;
                p.w -= &bw * cfg.lr;
            }
            constrain_in_place(&mut p);
        }
        let rec = epoch_record(&p, ds, &xtr, &ytr, epoch, cfg.top_k)?;
        let bad = !rec.train_loss.is_finite();
        debug_assert!(bad || rec.violation <= 1e-12, "constraint violated in epoch {epoch}");
        trace.push(rec);
        if bad {
            diverged = true;
            break;
        }
    }
    Ok(TrainOutput { params: p, trace, diverged })
}

/// How many hidden units [`svd_prune`] keeps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keep {
    Rank(usize),
    /// Smallest `r` with `Σ_{i≤r} σ_i² ≥ fraction·Σ σ_i²`.
    Energy(f64),
}

/// Rank of the energy rule on a descending spectrum.
pub fn energy_rank(svals: &[f64], fraction: f64) -> usize {
    let total: f64 = svals.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, s) in svals.iter().enumerate() {
        acc += s * s;
        if acc >= fraction * total {
            return i + 1;
        }
    }
    svals.len()
}

/// Replaces the hidden layer by the leading `r` singular triplets of
/// `U diag(w) = 𝒰𝒮𝒱ᵀ`: `U' = 𝒰_r`, `w' = σ_{1..r}`, `V' = V 𝒱_r`.
pub fn svd_prune(params: &UdvParams, keep: Keep) -> Result<UdvParams> {
    params.check()?;
    let m = params.width();
    let layer = params.scaled_input_layer();
    let svd = layer
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Argument("svd did not converge".into()))?;
    let (left, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let r = match keep {
        Keep::Rank(r) => {
            if r < 1 || r > m {
                return arg_err(format!("keep rank must be in [1, {m}]"));
            }
            r
        }
        Keep::Energy(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return arg_err("energy fraction must be in (0, 1]");
            }
            energy_rank(s.as_slice(), f)
        }
    };
    // Thin SVD has min(d, m) triplets.
    let r = r.min(s.len());
    Ok(UdvParams {
        u: left.columns(0, r).into_owned(),
        w: s.rows(0, r).into_owned(),
        v: &params.v * vt.rows(0, r).transpose(),
        variant: params.variant,
    })
}

/// Per-epoch CSV: `epoch,train_loss,test_loss,sv_1..sv_k`.
pub fn trace_csv(trace: &[EpochRecord], k: usize) -> String {
    let mut s = String::from("epoch,train_loss,test_loss");
    for i in 1..=k {
        s.push_str(&format!(",sv_{i}"));
    }
    s.push('\n');
    for r in trace {
        s.push_str(&format!("{},{:e},{:e}", r.epoch, r.train_loss, r.test_loss));
        for i in 0..k {
            s.push(',');
            if let Some(v) = r.svals.get(i) {
                s.push_str(&format!("{v:e}"));
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_params(rng: &mut SeededRng, d: usize, c: usize, m: usize, variant: Variant) -> UdvParams {
        UdvParams {
            u: Mat::from_fn(d, m, |_, _| rng.normal()),
            w: Vector::from_fn(m, |_, _| rng.normal()),
            v: Mat::from_fn(c, m, |_, _| rng.normal()),
            variant,
        }
    }

    #[test]
    fn forward_examples() {
        let mut rng = SeededRng::new(1);
        let mut p = rand_params(&mut rng, 3, 2, 4, Variant::Udv);
        p.w.fill(0.0);
        assert_eq!(forward(&p, &Vector::from_element(3, 1.0)).unwrap(), Vector::zeros(2));

        let p = UdvParams {
            u: Mat::from_column_slice(2, 1, &[1.0, 0.0]),
            w: Vector::from_element(1, 2.0),
            v: Mat::from_column_slice(2, 1, &[1.0, 0.0]),
            variant: Variant::Udv,
        };
        assert_eq!(forward(&p, &Vector::from_vec(vec![1.0, 0.0])).unwrap().as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn forward_matches_dense_product() {
        let mut rng = SeededRng::new(2);
        let p = rand_params(&mut rng, 6, 3, 4, Variant::UdvS);
        let x = Vector::from_vec(rng.normal_vec(6));
        let dense = &p.v * Mat::from_diagonal(&p.w) * p.u.transpose() * &x;
        assert!((forward(&p, &x).unwrap() - dense).norm() <= 1e-12);
    }

    #[test]
    fn loss_examples() {
        let mut rng = SeededRng::new(3);
        let p = rand_params(&mut rng, 3, 2, 2, Variant::Uv);
        let xb = Mat::from_fn(4, 3, |_, _| rng.normal());
        let yb = predict(&p, &xb).unwrap();
        assert_eq!(batch_loss(&p, &xb, &yb).unwrap(), 0.0);
        let mut y1 = yb.rows(0, 1).into_owned();
        y1[(0, 0)] += 2.0;
        assert!((batch_loss(&p, &xb.rows(0, 1).into_owned(), &y1).unwrap() - 2.0).abs() < 1e-12);
        assert!(batch_loss(&p, &Mat::zeros(0, 3), &Mat::zeros(0, 2)).is_err());
    }

    #[test]
    fn loss_matches_forward() {
        let mut rng = SeededRng::new(4);
        let p = rand_params(&mut rng, 5, 3, 4, Variant::Udv);
        let xb = Mat::from_fn(7, 5, |_, _| rng.normal());
        let yb = Mat::from_fn(7, 3, |_, _| rng.normal());
        let mut want = 0.0;
        for i in 0..7 {
            let r = forward(&p, &xb.row(i).transpose()).unwrap() - yb.row(i).transpose();
            want += 0.5 * r.norm_squared();
        }
        want /= 7.0;
        assert!((batch_loss(&p, &xb, &yb).unwrap() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn zero_residual_zero_grads() {
        let mut rng = SeededRng::new(5);
        let p = rand_params(&mut rng, 4, 2, 3, Variant::Udv);
        let xb = Mat::from_fn(5, 4, |_, _| rng.normal());
        let yb = predict(&p, &xb).unwrap();
        let g = param_grads(&p, &xb, &yb).unwrap();
        assert!(g.du.norm() < 1e-14 && g.dw.norm() < 1e-14 && g.dv.norm() < 1e-14);
    }

    #[test]
    fn scalar_chain_rule() {
        // φ = v w u x, loss = ½(φ − y)².
        let (u, w, v, x, y) = (0.7, 1.3, -0.4, 2.0, 0.5);
        let p = UdvParams {
            u: Mat::from_element(1, 1, u),
            w: Vector::from_element(1, w),
            v: Mat::from_element(1, 1, v),
            variant: Variant::UdvS,
        };
        let g = param_grads(&p, &Mat::from_element(1, 1, x), &Mat::from_element(1, 1, y)).unwrap();
        let r = v * w * u * x - y;
        assert!((g.du[(0, 0)] - r * v * w * x).abs() < 1e-15);
        assert!((g.dw[0] - r * v * u * x).abs() < 1e-15);
        assert!((g.dv[(0, 0)] - r * w * u * x).abs() < 1e-15);
    }

    #[test]
    fn constraint_examples() {
        let mut rng = SeededRng::new(6);
        let mut p = rand_params(&mut rng, 3, 2, 2, Variant::Udv);
        p.u = Mat::from_row_slice(3, 2, &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let q = apply_constraints(&p, Variant::Udv);
        assert_eq!(q.u[(0, 0)], 1.0);

        p.w = Vector::from_vec(vec![-1.0, 3.0]);
        assert_eq!(apply_constraints(&p, Variant::UdvV2).w, p.w);
        assert_eq!(apply_constraints(&p, Variant::UdvV1).w.as_slice(), &[0.0, 3.0]);
        assert_eq!(apply_constraints(&p, Variant::Uv), UdvParams { variant: Variant::Uv, ..p.clone() });
    }

    #[test]
    fn constraints_idempotent_and_feasible() {
        let mut rng = SeededRng::new(7);
        for v in Variant::ALL {
            let p = apply_constraints(&rand_params(&mut rng, 5, 3, 4, v), v);
            assert_eq!(apply_constraints(&p, v), p);
            assert!(p.violation() <= 1e-12, "{v}");
        }
    }

    #[test]
    fn width_helper() {
        // √(7·40) + 2√(40/7) = 16.73 + 4.78
        assert_eq!(hidden_width(40, 5), 22);
        assert_eq!(hidden_width(1, 1), 3);
    }

    #[test]
    fn prune_lossless_cases() {
        let mut rng = SeededRng::new(8);
        let mut p = rand_params(&mut rng, 6, 3, 5, Variant::UdvS);
        let x = Vector::from_vec(rng.normal_vec(6));
        let full = svd_prune(&p, Keep::Rank(5)).unwrap();
        assert!((forward(&full, &x).unwrap() - forward(&p, &x).unwrap()).norm() <= 1e-10);

        // Force U diag(w) to rank 2.
        let basis = Mat::from_fn(6, 2, |_, _| rng.normal());
        p.u = &basis * Mat::from_fn(2, 5, |_, _| rng.normal());
        let low = svd_prune(&p, Keep::Rank(2)).unwrap();
        assert_eq!(low.width(), 2);
        assert!((forward(&low, &x).unwrap() - forward(&p, &x).unwrap()).norm() <= 1e-10);
        assert!(svd_prune(&p, Keep::Rank(6)).is_err());
        assert!(svd_prune(&p, Keep::Rank(0)).is_err());
    }

    #[test]
    fn energy_rule() {
        assert_eq!(energy_rank(&[3.0, 1.0, 0.1], 0.89), 1);
        assert_eq!(energy_rank(&[3.0, 1.0, 0.1], 0.999), 2);
        assert_eq!(energy_rank(&[3.0, 1.0, 0.1], 1.0), 3);
    }

    #[test]
    fn tiny_lr_leaves_params() {
        let ds = gen_regression(50, 4, 2, 1, 0.1, 1.0, 0).unwrap();
        let mut cfg = TrainConfig::new(Variant::Udv, 3, 1e-300, 0.9, 8, 3, 1);
        cfg.top_k = 3;
        let out = train(&ds, &cfg).unwrap();
        let mut rng = SeededRng::new(1);
        let init = apply_constraints(&init_params(4, 2, 3, 0.02, Variant::Udv, &mut rng), Variant::Udv);
        assert_eq!(out.params, init);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let ds = gen_regression(400, 8, 3, 2, 0.05, 1.0, 3).unwrap();
        for v in Variant::ALL {
            let cfg = TrainConfig::new(v, 6, 0.05, 0.9, 32, 30, 4);
            let a = train(&ds, &cfg).unwrap();
            let b = train(&ds, &cfg).unwrap();
            assert_eq!(a.params, b.params);
            assert!(!a.diverged);
            assert!(a.trace.last().unwrap().train_loss < 0.5 * a.trace[0].train_loss, "{v}");
            assert!(a.trace.iter().all(|r| r.violation <= 1e-12));
        }
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let ds = gen_regression(101, 3, 2, 1, 0.1, 1.0, 9).unwrap();
        let mut all: Vec<usize> = ds.train.iter().chain(&ds.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..101).collect::<Vec<_>>());
        assert_eq!(ds.train.len(), 81);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let ds = gen_regression(20, 3, 2, 1, 0.1, 1.0, 9).unwrap();
        let back = RegressionDataset::from_csv(&ds.to_csv().unwrap(), 0.8, 9).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.train, ds.train);
        let mut rng = SeededRng::new(1);
        let p = rand_params(&mut rng, 3, 2, 2, Variant::UdvV1);
        let q: UdvParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, q);
    }
}
