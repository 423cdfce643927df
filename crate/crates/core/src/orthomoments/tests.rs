use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::linear::{GaussianLinearModel, LinearMoments};
use super::single_index::*;
use super::*;
use crate::numkit::{solve_spd, spd_inverse, Lu, Matrix};

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, q: usize) -> Matrix {
    Matrix::from_fn(q, q, |_, _| rng.sample(StandardNormal))
}

fn random_tensor(rng: &mut ChaCha8Rng, order: usize, q: usize) -> Tensor {
    Tensor::from_vec(order, q, random_vec(rng, q.pow(order as u32))).unwrap()
}

/// Well-conditioned random matrix: identity plus a small perturbation.
fn random_invertible(rng: &mut ChaCha8Rng, q: usize) -> Matrix {
    Matrix::from_fn(q, q, |i, j| if i == j { 2.0 } else { 0.0 } + 0.3 * rng.sample::<f64, _>(StandardNormal))
}

fn random_spd(rng: &mut ChaCha8Rng, q: usize) -> Matrix {
    let a = random_matrix(rng, q);
    a.matmul(&a.transpose()).scale(1.0 / q as f64).combine_identity(1.0)
}

trait AddIdentity {
    fn combine_identity(&self, c: f64) -> Matrix;
}

impl AddIdentity for Matrix {
    fn combine_identity(&self, c: f64) -> Matrix {
        let n = self.rows();
        Matrix::from_fn(n, n, |i, j| self[(i, j)] + if i == j { c } else { 0.0 })
    }
}

fn symmetric_matrix(rng: &mut ChaCha8Rng, q: usize) -> Matrix {
    let a = random_matrix(rng, q);
    Matrix::from_fn(q, q, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

#[test]
fn outer_power_examples() {
    let t = outer_power(&[1.0, 0.0], 3).unwrap();
    assert_eq!(t.get(&[0, 0, 0]), 1.0);
    assert_eq!(t.as_slice().iter().filter(|&&v| v != 0.0).count(), 1);
    assert_eq!(outer_power(&[2.0, 3.0], 2).unwrap().as_slice(), &[4.0, 6.0, 6.0, 9.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_vec(&mut rng, 4);
    let t = outer_power(&a, 3).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                assert_eq!(t.get(&[i, j, k]), a[i] * a[j] * a[k]);
            }
        }
    }
    assert!(matches!(outer_power(&vec![1.0; 1000], 3), Err(OrthoError::TensorBudget { .. })));
}

#[test]
fn mode_product_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = random_tensor(&mut rng, 3, 4);
    assert_eq!(mode_product(&Matrix::identity(4), &d).unwrap(), d);

    let c = random_matrix(&mut rng, 4);
    let a = random_vec(&mut rng, 4);
    let lhs = mode_product(&c, &outer_power(&a, 3).unwrap()).unwrap();
    let rhs = outer_power(&c.matvec(&a), 3).unwrap();
    assert!(lhs.combine(1.0, &rhs, -1.0).unwrap().max_abs() < 1e-12);

    let m2 = random_tensor(&mut rng, 2, 3);
    let doubled = mode_product(&Matrix::identity(3).scale(2.0), &m2).unwrap();
    assert!(doubled.combine(1.0, &m2, -4.0).unwrap().max_abs() < 1e-14);

    assert!(mode_product(&Matrix::identity(3), &d).is_err());
}

#[test]
fn mode_product_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = 3;
    let c = random_matrix(&mut rng, q);
    let d = random_tensor(&mut rng, 3, q);
    let got = mode_product(&c, &d).unwrap();
    for j1 in 0..q {
        for j2 in 0..q {
            for j3 in 0..q {
                let mut s = 0.0;
                for i1 in 0..q {
                    for i2 in 0..q {
                        for i3 in 0..q {
                            s += c[(j1, i1)] * c[(j2, i2)] * c[(j3, i3)] * d.get(&[i1, i2, i3]);
                        }
                    }
                }
                assert!((got.get(&[j1, j2, j3]) - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn contract_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e = random_tensor(&mut rng, 3, 3);
    assert_eq!(contract(&Tensor::zeros(3, 3).unwrap(), &e).unwrap(), 0.0);
    let ones = outer_power(&[1.0, 1.0], 2).unwrap();
    assert_eq!(contract(&ones, &ones).unwrap(), 4.0);

    let d = random_tensor(&mut rng, 3, 3);
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                s += d.get(&[i, j, k]) * e.get(&[i, j, k]);
            }
        }
    }
    assert!((contract(&d, &e).unwrap() - s).abs() < 1e-12);
    assert!(contract(&d, &ones).is_err());

    let v = random_vec(&mut rng, 3);
    assert!((d.multilinear(&v) - contract(&d, &outer_power(&v, 3).unwrap()).unwrap()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mode_product_composes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = 3;
        let (c1, c2) = (random_matrix(&mut rng, q), random_matrix(&mut rng, q));
        let d = random_tensor(&mut rng, 3, q);
        let nested = mode_product(&c1, &mode_product(&c2, &d).unwrap()).unwrap();
        let direct = mode_product(&c1.matmul(&c2), &d).unwrap();
        let scale = 1.0 + direct.max_abs();
        prop_assert!(nested.combine(1.0, &direct, -1.0).unwrap().max_abs() <= 1e-10 * scale);
    }

    #[test]
    fn contract_is_bilinear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d1, d2, e) = (random_tensor(&mut rng, 3, 3), random_tensor(&mut rng, 3, 3), random_tensor(&mut rng, 3, 3));
        let lhs = contract(&d1.combine(a, &d2, b).unwrap(), &e).unwrap();
        let rhs = a * contract(&d1, &e).unwrap() + b * contract(&d2, &e).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()) * 10.0);
    }
}

#[test]
fn numeric_derivatives_of_polynomials() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = 4;
    let h_true = symmetric_matrix(&mut rng, q);
    let lin = random_matrix(&mut rng, q);
    let (h1, l1) = (h_true.clone(), lin.clone());
    let sys = MomentSystem::new(
        q,
        move |beta, eta| beta + 0.5 * crate::numkit::dot(eta, &h1.matvec(eta)) + eta[0],
        move |_, eta| l1.matvec(eta),
    );
    let eta0 = random_vec(&mut rng, q);
    let (jac, hess) = numeric_derivatives(&sys, 0.3, &eta0, 2, 1e-4).unwrap();
    assert!(jac.max_abs_diff(&lin) < 1e-9);
    assert!(hess.to_matrix().unwrap().max_abs_diff(&h_true) < 1e-8);

    let constant = MomentSystem::new(3, |_, _| 2.5, |_, e| e.to_vec());
    for order in 1..=3 {
        let (_, t) = numeric_derivatives(&constant, 0.0, &[0.1, 0.2, 0.3], order, default_step(order)).unwrap();
        assert!(t.max_abs() <= 1e-10);
    }
}

#[test]
fn numeric_third_derivative_of_cubic() {
    // F = Σ_i c_i η_i³ + η_0 η_1 η_2
    let sys = MomentSystem::new(3, |_, e| 2.0 * e[0].powi(3) - e[1].powi(3) + e[0] * e[1] * e[2], |_, e| e.to_vec());
    let t = numeric_f_derivative(&sys.scalar_fn(), 0.0, &[0.4, -0.2, 1.1], 3, 5e-3).unwrap();
    assert!((t.get(&[0, 0, 0]) - 12.0).abs() < 1e-6);
    assert!((t.get(&[1, 1, 1]) + 6.0).abs() < 1e-6);
    for idx in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
        assert!((t.get(&idx) - 1.0).abs() < 1e-6);
    }
    assert!(t.get(&[2, 2, 2]).abs() < 1e-6);
    assert!(t.symmetrize().combine(1.0, &t, -1.0).unwrap().max_abs() == 0.0);
}

#[test]
fn lift_with_vanishing_derivative_is_identity() {
    let sys = MomentSystem::new(2, |beta, e| beta - 1.0 + e[0] - e[1], |_, e| vec![e[0] - 0.5, 2.0 * e[1]]);
    let lifted = lift(&sys, 1.0, &[0.5, 0.0], 2).unwrap();
    assert!(lifted.b0().max_abs() < 1e-6);
    let mut et = lifted.eta_tilde0();
    et[0] = 0.9;
    et[1] = -0.4;
    assert!((lifted.f_tilde(1.3, &et) - sys.f(1.3, &[0.9, -0.4])).abs() < 1e-6);
}

#[test]
fn second_order_tensor_path_matches_matrix_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for inst in 0..50 {
        let q = 2 + inst % 9;
        let a0 = random_invertible(&mut rng, q);
        let h = symmetric_matrix(&mut rng, q);
        let lu = Lu::factor(&a0).unwrap();
        let tensor = mode_solve(&lu, &Tensor::from_matrix(&h).unwrap()).unwrap().to_matrix().unwrap();
        let inv = lu.inverse();
        let matrix = inv.matmul(&h).matmul(&inv.transpose());
        assert!(tensor.max_abs_diff(&matrix) <= 1e-10 * (1.0 + matrix.max_abs()), "q = {q}");
    }
}

#[test]
fn first_order_lift_is_partialling_out() {
    let model = GaussianLinearModel::geometric(5, 0.5).unwrap();
    let base = model.naive_system();
    let lifted = lift(&base.system, base.beta0, &base.eta0, 1).unwrap();
    let b: Vec<f64> = lifted.b0().as_slice().to_vec();
    for (bj, gj) in b.iter().zip(&model.gamma0) {
        assert!((bj - gj).abs() < 1e-8);
    }
    let et0 = lifted.eta_tilde0();
    assert!(lifted.f_tilde(base.beta0, &et0).abs() < 1e-12);
    let report = certify_orthogonality(&lifted, base.beta0, &et0, 1, 20, None).unwrap();
    assert!(report.order(1) <= 1e-6, "{report:?}");

    let dirs = random_unit_directions(base.eta0.len(), 20, 1);
    let f = base.system.scalar_fn();
    let plain = certify_function(&*f, base.beta0, &base.eta0, &dirs, 1, None);
    assert!(plain.order(1) > 0.1);
}

#[test]
fn second_order_lift_of_double_lasso_is_triple_lasso() {
    let model = GaussianLinearModel::geometric(4, 0.5).unwrap();
    let p = 4;
    let base = model.double_lasso_system();
    let lifted = lift(&base.system, base.beta0, &base.eta0, 2).unwrap();
    let b0 = lifted.b0().to_matrix().unwrap();
    let th = &model.precision;
    let expected = Matrix::from_fn(2 * p, 2 * p, |i, j| match (i < p, j < p) {
        (true, true) => -2.0 * model.beta0 * th[(i, j)],
        (true, false) => th[(i, j - p)],
        (false, true) => th[(i - p, j)],
        (false, false) => 0.0,
    });
    assert!(b0.max_abs_diff(&expected) < 1e-6, "{}", b0.max_abs_diff(&expected));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut et = lifted.eta_tilde0();
    let q_tilde = et.len();
    for _ in 0..10 {
        let beta = 1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal);
        for v in et.iter_mut().take(2 * p) {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
        let got = lifted.f_tilde(beta, &et);
        // B0 freezes β at β0 in the γγ block, so the two differ by (β − β0)·u_γᵀΘu_γ
        let u_g = model.moments.with_x(&model.moments.treatment_residual(&et[..p]));
        let shift = (beta - model.beta0) * crate::numkit::dot(&u_g, &th.matvec(&u_g));
        let want = model.moments.psi_tl(beta, &et[..p], &et[p..2 * p], th) - shift;
        assert!((got - want).abs() < 1e-6 * (1.0 + want.abs()), "{got} vs {want}");
        let at_truth = lifted.f_tilde(model.beta0, &et);
        let tl = model.moments.psi_tl(model.beta0, &et[..p], &et[p..2 * p], th);
        assert!((at_truth - tl).abs() < 1e-6 * (1.0 + tl.abs()));
    }
    assert_eq!(q_tilde, 8 + 64 + 64);
}

#[test]
fn lifted_system_is_solved_at_truth() {
    let model = GaussianLinearModel::geometric(3, 0.4).unwrap();
    for k in 1..=3 {
        let base = model.system_for_order(k).unwrap();
        let lifted = lift(&base.system, base.beta0, &base.eta0, k).unwrap();
        let et0 = lifted.eta_tilde0();
        assert!(lifted.f_tilde(base.beta0, &et0).abs() < 1e-10, "k = {k}");
        let u = lifted.u_tilde(base.beta0, &et0).unwrap();
        assert_eq!(u.len(), lifted.dim_eta_tilde());
        assert!(u.iter().all(|v| v.abs() < 1e-8), "k = {k}");
    }
}

#[test]
fn certified_orders_for_the_linear_model() {
    let model = GaussianLinearModel::geometric(4, 0.5).unwrap();

    let dl = model.double_lasso_system();
    let lifted = lift(&dl.system, dl.beta0, &dl.eta0, 2).unwrap();
    let report = certify_orthogonality(&lifted, dl.beta0, &lifted.eta_tilde0(), 2, 20, None).unwrap();
    assert!(report.order(1) <= 1e-5 && report.order(2) <= 1e-5, "{report:?}");
    let dirs = random_unit_directions(dl.eta0.len(), 20, 3);
    let plain = certify_function(&*dl.system.scalar_fn(), dl.beta0, &dl.eta0, &dirs, 2, None);
    assert!(plain.order(1) <= 1e-6 && plain.order(2) >= 0.1, "{plain:?}");

    let tl = model.triple_lasso_system();
    let dirs = random_unit_directions(tl.eta0.len(), 20, 4);
    let plain = certify_function(&*tl.system.scalar_fn(), tl.beta0, &tl.eta0, &dirs, 3, None);
    assert!(plain.order(1) <= 1e-6 && plain.order(2) <= 1e-5, "{plain:?}");
    assert!(plain.order(3) > 1e-2, "{plain:?}");
    let lifted = lift(&tl.system, tl.beta0, &tl.eta0, 3).unwrap();
    let report = certify_orthogonality(&lifted, tl.beta0, &lifted.eta_tilde0(), 3, 20, None).unwrap();
    assert!(report.order(1) <= 1e-5 && report.order(2) <= 1e-5 && report.order(3) <= 1e-4, "{report:?}");
}

#[test]
fn lift_rejects_singular_jacobian() {
    let sys = MomentSystem::new(2, |_, e| e[0] * e[1], |_, e| vec![e[0] + e[1], e[0] + e[1]]);
    assert!(matches!(lift(&sys, 0.0, &[0.0, 0.0], 2), Err(OrthoError::Singular { .. })));
    assert!(lift(&sys, 0.0, &[0.0], 2).is_err());
    let ok = MomentSystem::new(2, |_, e| e[0] * e[1], |_, e| e.to_vec());
    let lifted = lift(&ok, 0.0, &[0.0, 0.0], 2).unwrap();
    assert!(certify_orthogonality(&lifted, 0.0, &lifted.eta_tilde0(), 3, 4, None).is_err());
}

#[test]
fn exact_fourth_order_lift_cancels_polynomial() {
    // F = (β − β0) + T[(η − η0)^{⊗4}]/4!, U = M(η − η0)
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = 3;
    let k = 4;
    let t = random_tensor(&mut rng, k, q).symmetrize();
    let m = random_invertible(&mut rng, q);
    let eta0 = random_vec(&mut rng, q);
    let beta0 = 0.7;
    let (tf, td, e0f, e0u) = (t.clone(), t.clone(), eta0.clone(), eta0.clone());
    let (mu, mj) = (m.clone(), m.clone());
    let sys = MomentSystem::new(
        q,
        move |beta, eta| {
            let dev: Vec<f64> = eta.iter().zip(&e0f).map(|(a, b)| a - b).collect();
            beta - beta0 + tf.multilinear(&dev) / 24.0
        },
        move |_, eta| mu.matvec(&eta.iter().zip(&e0u).map(|(a, b)| a - b).collect::<Vec<_>>()),
    )
    .with_exact_derivatives(ExactDerivatives {
        jacobian: Arc::new(move |_, _| mj.clone()),
        f_derivative: Arc::new(move |_, _, order| {
            assert_eq!(order, 4);
            td.clone()
        }),
    });
    let lifted = lift(&sys, beta0, &eta0, k).unwrap();
    let mut et = lifted.eta_tilde0();
    for _ in 0..5 {
        for v in et.iter_mut().take(q) {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
        let beta = beta0 + rng.sample::<f64, _>(StandardNormal);
        assert!((lifted.f_tilde(beta, &et) - (beta - beta0)).abs() < 1e-9);
    }
}

#[test]
fn squared_loss_single_index_reduces_to_triple_lasso() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = 4;
    let model = GaussianLinearModel::geometric(p, 0.5).unwrap();
    let eval = SquaredLossMoments(model.moments.clone());
    for _ in 0..20 {
        let beta = rng.sample::<f64, _>(StandardNormal);
        let gamma = random_vec(&mut rng, p);
        let phi = random_vec(&mut rng, p);
        let theta_w = random_spd(&mut rng, p);
        let theta: Vec<f64> = (0..p).map(|j| phi[j] - beta * gamma[j]).collect();
        let g = spd_inverse(&theta_w).unwrap().scale(2.0);
        let got = single_index_ftilde(&eval, beta, &theta, &gamma, &g, &Matrix::zeros(p, p)).unwrap();
        let want = model.moments.psi_tl(beta, &gamma, &phi, &theta_w);
        assert!((got + 2.0 * want).abs() < 1e-10 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn single_index_degenerate_cases() {
    let p = 3;
    let model = GaussianLinearModel::geometric(p, 0.0).unwrap();
    let eval = SquaredLossMoments(model.moments.clone());
    let g = Matrix::identity(p).scale(2.0);
    // at truth all three moment vectors vanish
    let v = single_index_ftilde(&eval, model.beta0, &model.theta0, &model.gamma0, &g, &Matrix::identity(p)).unwrap();
    assert!(v.abs() < 1e-12);
    // H = 0 with exact μ leaves F minus the G-weighted cross term, which is zero
    let m = eval.moments(1.4, &model.theta0, &model.gamma0);
    assert!(m.u_mu.iter().all(|u| u.abs() < 1e-12));
    let v = single_index_ftilde(&eval, 1.4, &model.theta0, &model.gamma0, &g, &Matrix::zeros(p, p)).unwrap();
    assert!((v - m.f).abs() < 1e-12);
    let singular = Matrix::zeros(p, p);
    assert!(single_index_ftilde(&eval, 1.0, &model.theta0, &model.gamma0, &singular, &g).is_err());
}

/// Logistic sample with `(β0, θ0, μ0)` solving the sample moment equations.
fn logistic_truth(n: usize, seed: u64) -> (EmpiricalMoments<LogisticLoss>, f64, Vec<f64>, Vec<f64>) {
    let p = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
    let d: Vec<f64> = (0..n).map(|i| 0.5 * x[(i, 0)] - 0.3 * x[(i, 2)] + rng.sample::<f64, _>(StandardNormal)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let t = 0.8 * d[i] + 0.5 * x[(i, 0)] - 0.4 * x[(i, 1)];
            if rng.random::<f64>() < 1.0 / (1.0 + (-t).exp()) { 1.0 } else { 0.0 }
        })
        .collect();
    let loss = LogisticLoss;
    // Newton steps on (β, θ)
    let z = Matrix::from_fn(n, p + 1, |i, j| if j == 0 { d[i] } else { x[(i, j - 1)] });
    let mut w = vec![0.0; p + 1];
    for _ in 0..30 {
        let mut grad = vec![0.0; p + 1];
        let mut hess = Matrix::zeros(p + 1, p + 1);
        for i in 0..n {
            let zi = z.row(i);
            let t = crate::numkit::dot(zi, &w);
            let (m1, m2) = (loss.d1(t, y[i]), loss.d2(t, y[i]));
            for a in 0..=p {
                grad[a] += m1 * zi[a] / n as f64;
                for b in 0..=p {
                    hess[(a, b)] += m2 * zi[a] * zi[b] / n as f64;
                }
            }
        }
        let step = solve_spd(&hess, &grad).unwrap();
        w.iter_mut().zip(&step).for_each(|(a, s)| *a -= s);
    }
    let (beta0, theta0) = (w[0], w[1..].to_vec());
    // weighted least squares for μ
    let mut gram = Matrix::zeros(p, p);
    let mut rhs = vec![0.0; p];
    for i in 0..n {
        let t = d[i] * beta0 + crate::numkit::dot(x.row(i), &theta0);
        let m2 = loss.d2(t, y[i]);
        for a in 0..p {
            rhs[a] += m2 * x[(i, a)] * d[i];
            for b in 0..p {
                gram[(a, b)] += m2 * x[(i, a)] * x[(i, b)];
            }
        }
    }
    let mu0 = solve_spd(&gram, &rhs).unwrap();
    (EmpiricalMoments { x, d, y, loss }, beta0, theta0, mu0)
}

#[test]
fn single_index_block_structure() {
    let (eval, beta0, theta0, mu0) = logistic_truth(4000, 10);
    let p = 3;
    let m = eval.moments(beta0, &theta0, &mu0);
    assert!(m.u_theta.iter().chain(&m.u_mu).all(|v| v.abs() < 1e-12), "{m:?}");

    let (g, h) = eval.curvature(beta0, &theta0, &mu0);
    let sys = single_index_system(Arc::new(eval));
    let mut eta0 = theta0.clone();
    eta0.extend_from_slice(&mu0);
    let (jac, hess) = numeric_derivatives(&sys, beta0, &eta0, 2, 1e-4).unwrap();
    let hess = hess.to_matrix().unwrap();
    let block = |m: &Matrix, bi: usize, bj: usize| Matrix::from_fn(p, p, |i, j| m[(bi * p + i, bj * p + j)]);
    assert!(block(&jac, 0, 0).max_abs_diff(&g) < 1e-5);
    assert!(block(&jac, 0, 1).max_abs() < 1e-5);
    assert!(block(&jac, 1, 0).max_abs_diff(&h) < 1e-5);
    assert!(block(&jac, 1, 1).max_abs_diff(&g.scale(-1.0)) < 1e-5);
    assert!(block(&hess, 0, 0).max_abs_diff(&h) < 1e-4);
    assert!(block(&hess, 0, 1).max_abs_diff(&g.scale(-1.0)) < 1e-4);
    assert!(block(&hess, 1, 1).max_abs() < 1e-4);

    // closed-form B0 against the generic path fed with the exact blocks
    let a0 = Matrix::from_fn(2 * p, 2 * p, |i, j| match (i < p, j < p) {
        (true, true) => g[(i, j)],
        (true, false) => h[(i, j - p)],
        (false, true) => 0.0,
        (false, false) => -g[(i - p, j - p)],
    });
    let d2f = Matrix::from_fn(2 * p, 2 * p, |i, j| match (i < p, j < p) {
        (true, true) => h[(i, j)],
        (true, false) => -g[(i, j - p)],
        (false, true) => -g[(i - p, j)],
        (false, false) => 0.0,
    });
    let generic = mode_solve(&Lu::factor(&a0).unwrap(), &Tensor::from_matrix(&d2f).unwrap()).unwrap().to_matrix().unwrap();
    let closed = single_index_b0(&g, &h).unwrap();
    assert!(generic.max_abs_diff(&closed) < 1e-8);

    let lifted = lift(&sys, beta0, &eta0, 2).unwrap();
    assert!(lifted.b0().to_matrix().unwrap().max_abs_diff(&closed) < 1e-5);
}

#[test]
fn single_index_closed_form_matches_lift() {
    let (eval, beta0, theta0, mu0) = logistic_truth(3000, 11);
    let (g, h) = eval.curvature(beta0, &theta0, &mu0);
    let eval = Arc::new(eval);
    let sys = single_index_system(eval.clone());
    let mut eta0 = theta0.clone();
    eta0.extend_from_slice(&mu0);
    let lifted = lift(&sys, beta0, &eta0, 2).unwrap();

    let report = certify_orthogonality(&lifted, beta0, &lifted.eta_tilde0(), 2, 20, None).unwrap();
    assert!(report.order(1) <= 1e-5 && report.order(2) <= 1e-5, "{report:?}");

    // the generic F̃ with the closed-form B0 equals the displayed formula anywhere
    let closed = single_index_b0(&g, &h).unwrap();
    let q = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let beta = beta0 + 0.2 * rng.sample::<f64, _>(StandardNormal);
        let eta: Vec<f64> = eta0.iter().map(|v| v + 0.2 * rng.sample::<f64, _>(StandardNormal)).collect();
        let u = sys.u(beta, &eta);
        let generic = sys.f(beta, &eta) - 0.5 * crate::numkit::dot(&u, &closed.matvec(&u));
        let formula = single_index_ftilde(&*eval, beta, &eta[..3], &eta[3..], &g, &h).unwrap();
        assert!((generic - formula).abs() < 1e-12, "{generic} vs {formula}");
        assert_eq!(u.len(), q);
    }
}

#[test]
fn linear_moments_from_sample_match_direct_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, p) = (50, 3);
    let x = Matrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
    let d = random_vec(&mut rng, n);
    let y = random_vec(&mut rng, n);
    let lm = LinearMoments::from_sample(&x, &d, &y).unwrap();
    let gamma = random_vec(&mut rng, p);
    let phi = random_vec(&mut rng, p);
    let direct: f64 = (0..n)
        .map(|i| {
            let v = d[i] - crate::numkit::dot(x.row(i), &gamma);
            let r = y[i] - crate::numkit::dot(x.row(i), &phi) - 0.6 * v;
            r * v
        })
        .sum::<f64>()
        / n as f64;
    assert!((lm.psi_dl(0.6, &gamma, &phi) - direct).abs() < 1e-12);
}
