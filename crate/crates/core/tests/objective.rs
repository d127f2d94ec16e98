mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use common::{fd_gradient, rel_err, rng};
use recede_core::dynamics::SimState;
use recede_core::objective::{project_psd, risk_slope, risk_transform, CostSpec, CostTerm, Norm};
use recede_core::task::registry;

proptest! {
    #[test]
    fn risk_fixed_point_and_unit_slope(risk in -5.0f64..5.0) {
        prop_assert_eq!(risk_transform(0.0, risk), 0.0);
        prop_assert_eq!(risk_slope(0.0, risk), 1.0);
    }

    // Past R·l ≈ −30, e^{R l} drops below the spacing of doubles near −1/R and
    // ρ saturates at its bound in floating point; the domains stay inside.
    #[test]
    fn risk_is_monotone_and_non_negative(risk in -2.0f64..5.0, l in 0.0f64..10.0, dl in 1e-6f64..1.0) {
        let a = risk_transform(l, risk);
        let b = risk_transform(l + dl, risk);
        prop_assert!(a >= 0.0);
        prop_assert!(b > a);
    }

    #[test]
    fn risk_seeking_is_bounded(risk in -3.0f64..-1e-3, l in 0.0f64..10.0) {
        prop_assert!(risk_transform(l, risk) < -1.0 / risk);
        prop_assert!(risk_transform(l, risk) <= l);
    }

    #[test]
    fn risk_averse_dominates_identity(risk in 1e-3f64..5.0, l in 0.0f64..10.0) {
        prop_assert!(risk_transform(l, risk) >= l);
    }

    #[test]
    fn risk_keeps_units(risk in -2.0f64..2.0, l in 0.0f64..5.0, k in 0.1f64..10.0) {
        // Rescaling the cost unit rescales R inversely and ρ along with l.
        let lhs = risk_transform(k * l, risk / k);
        let rhs = k * risk_transform(l, risk);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn risk_tends_to_identity(l in 0.0f64..10.0) {
        prop_assert!((risk_transform(l, 1e-9) - l).abs() < 1e-6);
        prop_assert!((risk_transform(l, -1e-9) - l).abs() < 1e-6);
    }

    #[test]
    fn psd_projection_is_psd_and_idempotent(seed in any::<u64>(), n in 1usize..6) {
        let mut r = rng(seed);
        let m = DMatrix::from_fn(n, n, |_, _| r.random_range(-1.0..1.0));
        let p = project_psd(&m);
        let eig = p.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|l| *l > -1e-12));
        prop_assert!((project_psd(&p) - &p).amax() < 1e-12);
    }
}

#[test]
fn inverted_gaussian_for_negative_unit_risk() {
    let cost = CostSpec::new(vec![CostTerm::new("r", 1.0, Norm::quadratic(), 0, 2)], -1.0);
    let r = [0.3, -0.4];
    assert!((cost.cost(&r) - (1.0 - (-0.25f64).exp())).abs() < 1e-15);
}

#[test]
fn norm_derivatives_match_finite_differences() {
    let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let norms = [
        Norm::quadratic(),
        Norm::Quadratic { weight_matrix: Some(w) },
        Norm::SmoothAbs { p: 0.3 },
        Norm::HyperbolicCosine { p: 0.7 },
    ];
    let mut r = rng(3);
    for norm in &norms {
        for _ in 0..20 {
            let x = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
            let e = norm.eval(&x);
            assert_eq!(e.value, norm.value(&x));
            let g = fd_gradient(&x, 1e-5, |y| norm.value(y));
            assert!(rel_err(e.gradient.as_slice(), &g, 1e-8) < 1e-7, "{norm:?}");
            for i in 0..2 {
                let col = fd_gradient(&x, 1e-5, |y| norm.eval(y).gradient[i]);
                assert!(rel_err(e.hessian.row(i).transpose().as_slice(), &col, 1e-8) < 1e-6, "{norm:?}");
            }
        }
    }
}

#[test]
fn cost_gradient_matches_finite_differences_on_every_task() {
    let mut r = rng(11);
    for task in registry() {
        let model = task.build_model().unwrap();
        let spec = model.spec().clone();
        for risk in [0.0, 0.3, -0.3] {
            let mut cost = task.cost.clone();
            cost.risk = risk;
            for _ in 0..10 {
                let x: Vec<f64> = (0..spec.nx()).map(|_| r.random_range(-2.0..2.0)).collect();
                let u: Vec<f64> = (0..spec.nu)
                    .map(|i| r.random_range(spec.control_lower[i]..spec.control_upper[i]) * 0.9)
                    .collect();
                let state = SimState::from_flat(&x, spec.nq, 0.0);
                let jac = model.fd_jacobians(&state, &u, 1e-6).unwrap();
                let res = model.residual(&state, &u).unwrap();
                let (gx, gu) = cost.gradient(&res, &jac.c, &jac.d).unwrap();
                let c_of_x = |y: &[f64]| cost.cost(&model.residual(&SimState::from_flat(y, spec.nq, 0.0), &u).unwrap());
                let c_of_u = |v: &[f64]| cost.cost(&model.residual(&state, v).unwrap());
                let fx = fd_gradient(&x, 1e-5, c_of_x);
                let fu = fd_gradient(&u, 1e-5, c_of_u);
                // The floor keeps FD rounding (~1e-11) from dominating tiny gradients.
                assert!(rel_err(gx.as_slice(), &fx, 1e-4) < 1e-5, "{} x", task.name);
                assert!(rel_err(gu.as_slice(), &fu, 1e-4) < 1e-5, "{} u", task.name);
            }
        }
    }
}

#[test]
fn gauss_newton_hessian_is_exact_for_linear_quadratic() {
    // Linear residual r = C x + D u with quadratic norms: l = rᵀWr exactly.
    let mut r = rng(5);
    let c = DMatrix::from_fn(3, 2, |_, _| r.random_range(-1.0..1.0));
    let d = DMatrix::from_fn(3, 1, |_, _| r.random_range(-1.0..1.0));
    let w = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 1.5]);
    let cost = CostSpec::new(vec![CostTerm::new("lq", 0.7, Norm::Quadratic { weight_matrix: Some(w.clone()) }, 0, 3)], 0.0);
    let x = DVector::from_vec(vec![0.4, -0.2]);
    let u = DVector::from_vec(vec![0.9]);
    let res = &c * &x + &d * &u;
    let derivs = cost.derivatives(res.as_slice(), &c, &d).unwrap();
    let hxx = c.transpose() * &w * &c * 1.4;
    let huu = d.transpose() * &w * &d * 1.4;
    let hxu = c.transpose() * &w * &d * 1.4;
    assert!((derivs.cxx - hxx).amax() < 1e-12);
    assert!((derivs.cuu - huu).amax() < 1e-12);
    assert!((derivs.cxu - hxu).amax() < 1e-12);
}

#[test]
fn risk_hessian_includes_outer_product() {
    // Scalar l = w r², r = x: c = (e^{R l} − 1)/R, c'' = e^{R l}(2w + R (2 w x)²).
    let (w, risk, x) = (0.5, 0.8, 1.3);
    let cost = CostSpec::new(vec![CostTerm::new("x", w, Norm::quadratic(), 0, 1)], risk);
    let one = DMatrix::from_element(1, 1, 1.0);
    let none = DMatrix::zeros(1, 0);
    let d = cost.derivatives(&[x], &one, &none).unwrap();
    let l = w * x * x;
    let expected = (risk * l).exp() * (2.0 * w + risk * (2.0 * w * x).powi(2));
    assert!((d.cxx[(0, 0)] - expected).abs() < 1e-12);
}
