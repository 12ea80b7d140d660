//! Central finite differences against the analytic gradients.

use nalgebra::{DMatrix, DVector};

use udufact::linops::{self, MeasurementOp};
use udufact::rng::SeededRng;
use udufact::udv::{self, UdvParams, Variant};

const INSTANCES: u64 = 100;
const TOL: f64 = 1e-6;

fn random_op(rng: &mut SeededRng) -> MeasurementOp {
    let d = 1 + pick(rng, 6);
    if rng.uniform() < 0.5 {
        let n = 1 + pick(rng, d * d);
        let pos = rng.sample_distinct((d * d) as u64, n);
        MeasurementOp::entry_mask(d, pos.into_iter().map(|p| (p as usize / d, p as usize % d)).collect()).unwrap()
    } else {
        let n = 1 + pick(rng, 3 * d);
        MeasurementOp::rank_one(DMatrix::from_fn(n, d, |_, _| rng.normal())).unwrap()
    }
}

fn pick(rng: &mut SeededRng, n: usize) -> usize {
    rng.below(n as u64) as usize
}

/// Finite-difference gradient of `f` over symmetric `X`: perturbing the pair
/// `(i, j), (j, i)` together moves `f` by `2 G_ij` off the diagonal.
fn fd_symmetric(f: impl Fn(&DMatrix<f64>) -> f64, x: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let d = x.nrows();
    let mut g = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut e = DMatrix::zeros(d, d);
            e[(i, j)] = 1.0;
            e[(j, i)] = 1.0;
            let diff = (f(&(x + &e * h)) - f(&(x - &e * h))) / (2.0 * h);
            let v = if i == j { diff } else { diff / 2.0 };
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

#[test]
fn grad_x_matches_finite_differences() {
    let mut rng = SeededRng::new(11);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let op = random_op(&mut rng);
        let d = op.dim();
        let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
        let x = (&a + a.transpose()) * 0.5;
        let b = DVector::from_fn(op.len(), |_, _| rng.normal());
        let g = linops::grad_x(&op, &x, &b).unwrap();
        let fd = fd_symmetric(|y| linops::objective(&op, y, &b).unwrap(), &x, 1e-5);
        if g.norm() < 1e-12 {
            assert!(fd.norm() < 1e-8);
            continue;
        }
        worst = worst.max(rel_err(&g, &fd));
    }
    assert!(worst <= TOL, "worst relative error {worst:e}");
}

fn fd_matrix(f: &dyn Fn(&DMatrix<f64>) -> f64, m: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        let (mut p, mut q) = (m.clone(), m.clone());
        p[(i, j)] += h;
        q[(i, j)] -= h;
        (f(&p) - f(&q)) / (2.0 * h)
    })
}

#[test]
fn param_grads_match_finite_differences() {
    let mut rng = SeededRng::new(12);
    let h = 1e-5;
    for variant in Variant::ALL {
        let mut worst = 0.0f64;
        for _ in 0..INSTANCES {
            let (d, c, m, n) = (1 + pick(&mut rng, 6), 1 + pick(&mut rng, 4), 1 + pick(&mut rng, 5), 1 + pick(&mut rng, 8));
            let params = UdvParams {
                u: DMatrix::from_fn(d, m, |_, _| rng.normal()),
                w: DVector::from_fn(m, |_, _| rng.normal()),
                v: DMatrix::from_fn(c, m, |_, _| rng.normal()),
                variant,
            };
            let xb = DMatrix::from_fn(n, d, |_, _| rng.normal());
            let yb = DMatrix::from_fn(n, c, |_, _| rng.normal());
            let g = udv::param_grads(&params, &xb, &yb).unwrap();
            let loss = |p: &UdvParams| udv::batch_loss(p, &xb, &yb).unwrap();

            let du = fd_matrix(&|u| loss(&UdvParams { u: u.clone(), ..params.clone() }), &params.u, h);
            let dv = fd_matrix(&|v| loss(&UdvParams { v: v.clone(), ..params.clone() }), &params.v, h);
            let w_col = DMatrix::from_column_slice(m, 1, params.w.as_slice());
            let dw = fd_matrix(
                &|w| loss(&UdvParams { w: DVector::from_column_slice(w.as_slice()), ..params.clone() }),
                &w_col,
                h,
            );
            let analytic = [g.du, DMatrix::from_column_slice(m, 1, g.dw.as_slice()), g.dv];
            for (a, f) in analytic.iter().zip([du, dw, dv]) {
                if a.norm() < 1e-10 && f.norm() < 1e-8 {
                    continue;
                }
                worst = worst.max(rel_err(a, &f));
            }
        }
        assert!(worst <= TOL, "{variant}: worst relative error {worst:e}");
    }
}
