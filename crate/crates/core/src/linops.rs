//! Linear measurement operators on symmetric matrices and the least-squares
//! objective `f(X) = ½‖A(X) − b‖²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// A measurement map from `d×d` symmetric matrices to `R^n`.
///
/// Serialized as `{"kind":"entry_mask","dim":d,"indices":[[i,j],...]}` or
/// `{"kind":"rank_one","dim":d,"vectors":[[...],...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OpRepr", into = "OpRepr")]
pub struct MeasurementOp {
    dim: usize,
    kind: OpKind,
}

#[derive(Clone, Debug, PartialEq)]
enum OpKind {
    EntryMask(Vec<(usize, usize)>),
    /// Sensing vectors stored as the rows of an `n×d` matrix.
    RankOne(Mat),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OpRepr {
    EntryMask { dim: usize, indices: Vec<[usize; 2]> },
    RankOne { dim: usize, vectors: Vec<Vec<f64>> },
}

impl TryFrom<OpRepr> for MeasurementOp {
    type Error = Error;

    fn try_from(r: OpRepr) -> Result<Self> {
        match r {
            OpRepr::EntryMask { dim, indices } => {
                MeasurementOp::entry_mask(dim, indices.into_iter().map(|[i, j]| (i, j)).collect())
            }
            OpRepr::RankOne { dim, vectors } => MeasurementOp::rank_one_from_rows(dim, &vectors),
        }
    }
}

impl From<MeasurementOp> for OpRepr {
    fn from(op: MeasurementOp) -> Self {
        match op.kind {
            OpKind::EntryMask(ix) => OpRepr::EntryMask {
                dim: op.dim,
                indices: ix.into_iter().map(|(i, j)| [i, j]).collect(),
            },
            OpKind::RankOne(a) => OpRepr::RankOne {
                dim: op.dim,
                vectors: a.row_iter().map(|r| r.iter().copied().collect()).collect(),
            },
        }
    }
}

impl MeasurementOp {
    /// Entry sampling. Positions are ordered `(row, col)` pairs; `(i,j)` and
    /// `(j,i)` are distinct positions, exact repeats are rejected.
    pub fn entry_mask(dim: usize, indices: Vec<(usize, usize)>) -> Result<Self> {
        if indices.is_empty() {
            return arg_err("operator needs at least one measurement");
        }
        let mut seen = std::collections::HashSet::with_capacity(indices.len());
        for &(i, j) in &indices {
            if i >= dim || j >= dim {
                return arg_err(format!("index ({i},{j}) out of range for dim {dim}"));
            }
            if !seen.insert((i, j)) {
                return arg_err(format!("duplicate index ({i},{j})"));
            }
        }
        Ok(Self { dim, kind: OpKind::EntryMask(indices) })
    }

    /// Rank-one sensing `A(X)_i = a_iᵀ X a_i`; row `i` of `vectors` is `a_i`.
    pub fn rank_one(vectors: Mat) -> Result<Self> {
        if vectors.nrows() == 0 {
            return arg_err("operator needs at least one measurement");
        }
        Ok(Self { dim: vectors.ncols(), kind: OpKind::RankOne(vectors) })
    }

    pub fn rank_one_from_rows(dim: usize, rows: &[Vec<f64>]) -> Result<Self> {
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return dim_err(format!("sensing vector {bad} has length {}, expected {dim}", rows[bad].len()));
        }
        let a = Mat::from_fn(rows.len(), dim, |i, k| rows[i][k]);
        let mut op = Self::rank_one(a)?;
        op.dim = dim;
        Ok(op)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of measurements `n`.
    pub fn len(&self) -> usize {
        match &self.kind {
            OpKind::EntryMask(ix) => ix.len(),
            OpKind::RankOne(a) => a.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            OpKind::EntryMask(_) => "entry_mask",
            OpKind::RankOne(_) => "rank_one",
        }
    }

    pub fn indices(&self) -> Option<&[(usize, usize)]> {
        match &self.kind {
            OpKind::EntryMask(ix) => Some(ix),
            OpKind::RankOne(_) => None,
        }
    }

    /// Sensing vectors as rows, for rank-one operators.
    pub fn sensing(&self) -> Option<&Mat> {
        match &self.kind {
            OpKind::RankOne(a) => Some(a),
            OpKind::EntryMask(_) => None,
        }
    }

    fn check_square(&self, x: &Mat) -> Result<()> {
        if x.nrows() != self.dim || x.ncols() != self.dim {
            return dim_err(format!("expected {0}x{0} matrix, got {1}x{2}", self.dim, x.nrows(), x.ncols()));
        }
        Ok(())
    }

    fn check_len(&self, v: &Vector, what: &str) -> Result<()> {
        if v.len() != self.len() {
            return dim_err(format!("{what} has length {}, operator has {} measurements", v.len(), self.len()));
        }
        Ok(())
    }

    fn check_factor(&self, u: &Mat, lambda: &[f64]) -> Result<()> {
        if u.nrows() != self.dim || u.ncols() != lambda.len() {
            return dim_err(format!(
                "factor is {}x{} with {} weights, operator dim {}",
                u.nrows(),
                u.ncols(),
                lambda.len(),
                self.dim
            ));
        }
        Ok(())
    }

    /// `A(X)`.
    pub fn apply(&self, x: &Mat) -> Result<Vector> {
        self.check_square(x)?;
        Ok(match &self.kind {
            OpKind::EntryMask(ix) => Vector::from_iterator(ix.len(), ix.iter().map(|&(i, j)| x[(i, j)])),
            OpKind::RankOne(a) => {
                let ax = a * x;
                Vector::from_fn(a.nrows(), |i, _| ax.row(i).dot(&a.row(i)))
            }
        })
    }

    /// `A*(r)`, symmetrized so the result is bit-symmetric.
    pub fn adjoint(&self, r: &Vector) -> Result<Mat> {
        self.check_len(r, "residual")?;
        let g = match &self.kind {
            OpKind::EntryMask(ix) => {
                let mut g = Mat::zeros(self.dim, self.dim);
                for (&(i, j), &rk) in ix.iter().zip(r.iter()) {
                    g[(i, j)] += rk;
                }
                g
            }
            OpKind::RankOne(a) => {
                let mut ra = a.clone();
                for (mut row, &ri) in ra.row_iter_mut().zip(r.iter()) {
                    row *= ri;
                }
                a.transpose() * ra
            }
        };
        Ok(symmetrize(&g))
    }

    /// `A(U diag(λ) Uᵀ)` without forming the `d×d` product.
    pub fn apply_factored(&self, u: &Mat, lambda: &[f64]) -> Result<Vector> {
        self.check_factor(u, lambda)?;
        Ok(match &self.kind {
            OpKind::EntryMask(ix) => {
                let ut = u.transpose();
                Vector::from_iterator(
                    ix.len(),
                    ix.iter().map(|&(i, j)| {
                        let (ci, cj) = (ut.column(i), ut.column(j));
                        let mut s = 0.0;
                        for k in 0..lambda.len() {
                            s += lambda[k] * ci[k] * cj[k];
                        }
                        s
                    }),
                )
            }
            OpKind::RankOne(a) => weighted_row_squares(&(a * u), lambda),
        })
    }

    /// Residual `A(U diag(λ) Uᵀ) − b` and the product `A*(residual)·U`, which
    /// is all a factored gradient step needs. Shares the `A·U` product for
    /// rank-one operators.
    pub fn factored_gradient(&self, u: &Mat, lambda: &[f64], b: &Vector) -> Result<(Vector, Mat)> {
        self.check_factor(u, lambda)?;
        self.check_len(b, "measurement vector")?;
        match &self.kind {
            OpKind::EntryMask(ix) => {
                // Rows of U are the contiguous columns of Uᵀ.
                let r = u.ncols();
                let ut = u.transpose();
                let rows = ut.as_slice();
                let row = |i: usize| &rows[i * r..(i + 1) * r];
                let mut resid = Vector::zeros(ix.len());
                for (k, &(i, j)) in ix.iter().enumerate() {
                    let (a, c) = (row(i), row(j));
                    let mut s = 0.0;
                    for t in 0..r {
                        s += lambda[t] * a[t] * c[t];
                    }
                    resid[k] = s - b[k];
                }
                let mut gu_rows = vec![0.0; self.dim * r];
                for (&(i, j), &rk) in ix.iter().zip(resid.iter()) {
                    let h = 0.5 * rk;
                    let (ri, rj) = (row(i), row(j));
                    for t in 0..r {
                        gu_rows[i * r + t] += h * rj[t];
                    }
                    for t in 0..r {
                        gu_rows[j * r + t] += h * ri[t];
                    }
                }
                Ok((resid, Mat::from_row_slice(self.dim, r, &gu_rows)))
            }
            OpKind::RankOne(a) => {
                let au = a * u;
                let resid = weighted_row_squares(&au, lambda) - b;
                let mut rau = au;
                for (mut row, &ri) in rau.row_iter_mut().zip(resid.iter()) {
                    row *= ri;
                }
                Ok((resid, a.tr_mul(&rau)))
            }
        }
    }
}

fn weighted_row_squares(au: &Mat, lambda: &[f64]) -> Vector {
    let mut out = Vector::zeros(au.nrows());
    for (k, &l) in lambda.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(au.column(k).iter()) {
            *o += l * v * v;
        }
    }
    out
}

/// `½(M + Mᵀ)`.
pub fn symmetrize(m: &Mat) -> Mat {
    let mut s = m.clone();
    let n = m.nrows();
    for j in 0..n {
        for i in 0..n {
            s[(i, j)] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    s
}

pub fn apply_op(op: &MeasurementOp, x: &Mat) -> Result<Vector> {
    op.apply(x)
}

pub fn adjoint_op(op: &MeasurementOp, r: &Vector) -> Result<Mat> {
    op.adjoint(r)
}

/// `½‖A(X) − b‖²`.
pub fn objective(op: &MeasurementOp, x: &Mat, b: &Vector) -> Result<f64> {
    op.check_len(b, "measurement vector")?;
    Ok(0.5 * (op.apply(x)? - b).norm_squared())
}

/// `∇f(X) = A*(A(X) − b)`.
pub fn grad_x(op: &MeasurementOp, x: &Mat, b: &Vector) -> Result<Mat> {
    op.check_len(b, "measurement vector")?;
    op.adjoint(&(op.apply(x)? - b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_sym(rng: &mut SeededRng, d: usize) -> Mat {
        let m = Mat::from_fn(d, d, |_, _| rng.normal());
        symmetrize(&m)
    }

    fn rand_ops(rng: &mut SeededRng, d: usize) -> Vec<MeasurementOp> {
        let pos = rng.sample_distinct((d * d) as u64, 2 * d);
        let ix = pos.iter().map(|&p| (p as usize / d, p as usize % d)).collect();
        let a = Mat::from_fn(3 * d, d, |_, _| rng.normal());
        vec![MeasurementOp::entry_mask(d, ix).unwrap(), MeasurementOp::rank_one(a).unwrap()]
    }

    #[test]
    fn entry_read() {
        let op = MeasurementOp::entry_mask(2, vec![(0, 0), (1, 1)]).unwrap();
        let x = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        assert_eq!(op.apply(&x).unwrap().as_slice(), &[1.0, 5.0]);
    }

    #[test]
    fn rank_one_read() {
        let op = MeasurementOp::rank_one_from_rows(2, &[vec![1.0, 0.0]]).unwrap();
        let x = Mat::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 7.0]);
        assert_eq!(op.apply(&x).unwrap().as_slice(), &[3.0]);
    }

    #[test]
    fn apply_matches_double_loop() {
        let mut rng = SeededRng::new(4);
        for op in rand_ops(&mut rng, 5) {
            let x = rand_sym(&mut rng, 5);
            let got = op.apply(&x).unwrap();
            let want: Vec<f64> = match op.sensing() {
                None => op.indices().unwrap().iter().map(|&(i, j)| x[(i, j)]).collect(),
                Some(a) => (0..a.nrows())
                    .map(|i| {
                        let mut s = 0.0;
                        for p in 0..5 {
                            for q in 0..5 {
                                s += a[(i, p)] * x[(p, q)] * a[(i, q)];
                            }
                        }
                        s
                    })
                    .collect(),
            };
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
            }
        }
    }

    #[test]
    fn adjoint_examples() {
        let op = MeasurementOp::entry_mask(2, vec![(0, 1)]).unwrap();
        let g = op.adjoint(&Vector::from_vec(vec![3.0])).unwrap();
        assert_eq!(g, Mat::from_row_slice(2, 2, &[0.0, 1.5, 1.5, 0.0]));
        let op = MeasurementOp::rank_one_from_rows(2, &[vec![1.0, 1.0]]).unwrap();
        let g = op.adjoint(&Vector::from_vec(vec![2.0])).unwrap();
        assert_eq!(g, Mat::from_element(2, 2, 2.0));
    }

    #[test]
    fn objective_examples() {
        let op = MeasurementOp::entry_mask(2, vec![(0, 0), (1, 1)]).unwrap();
        let x = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        let b = Vector::from_vec(vec![1.0, 5.0]);
        assert_eq!(objective(&op, &x, &b).unwrap(), 0.0);
        assert_eq!(grad_x(&op, &x, &b).unwrap(), Mat::zeros(2, 2));
        let b = Vector::from_vec(vec![-2.0, 1.0]);
        assert_eq!(objective(&op, &x, &b).unwrap(), 12.5);
    }

    #[test]
    fn single_entry_gradient() {
        let op = MeasurementOp::entry_mask(1, vec![(0, 0)]).unwrap();
        let g = grad_x(&op, &Mat::from_element(1, 1, 2.0), &Vector::from_vec(vec![1.0])).unwrap();
        assert_eq!(g, Mat::from_element(1, 1, 1.0));
    }

    #[test]
    fn factored_paths_match_dense() {
        let mut rng = SeededRng::new(9);
        for op in rand_ops(&mut rng, 6) {
            let u = Mat::from_fn(6, 4, |_, _| rng.normal());
            let lam: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            let x = &u * Mat::from_diagonal(&Vector::from_column_slice(&lam)) * u.transpose();
            let b = Vector::from_fn(op.len(), |_, _| rng.normal());
            let dense_r = op.apply(&x).unwrap() - &b;
            let dense_gu = op.adjoint(&dense_r).unwrap() * &u;
            let (r, gu) = op.factored_gradient(&u, &lam, &b).unwrap();
            assert!((r - &dense_r).norm() <= 1e-12 * (1.0 + dense_r.norm()));
            assert!((gu - &dense_gu).norm() <= 1e-12 * (1.0 + dense_gu.norm()));
        }
    }

    #[test]
    fn rejects_bad_ops() {
        assert!(MeasurementOp::entry_mask(2, vec![(0, 2)]).is_err());
        assert!(MeasurementOp::entry_mask(2, vec![(0, 1), (0, 1)]).is_err());
        assert!(MeasurementOp::entry_mask(2, vec![]).is_err());
        assert!(MeasurementOp::rank_one_from_rows(2, &[vec![1.0]]).is_err());
        let op = MeasurementOp::entry_mask(2, vec![(0, 1)]).unwrap();
        assert!(op.apply(&Mat::zeros(3, 3)).is_err());
        assert!(op.adjoint(&Vector::zeros(2)).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = SeededRng::new(1);
        for op in rand_ops(&mut rng, 3) {
            let s = serde_json::to_string(&op).unwrap();
            let back: MeasurementOp = serde_json::from_str(&s).unwrap();
            assert_eq!(op, back);
        }
        let s = r#"{"kind":"entry_mask","dim":2,"indices":[[0,0],[0,0]]}"#;
        assert!(serde_json::from_str::<MeasurementOp>(s).is_err());
    }
}
