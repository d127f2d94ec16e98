//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

pub mod checks;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use recede_core::dynamics::{Model, System};
use recede_core::objective::{CostSpec, CostTerm, Norm};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

/// Centered finite-difference gradient of a scalar function.
pub fn fd_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Cart-pole accelerations by elimination (pole angle from hanging down).
pub fn cart_pole_accel(p: &recede_core::dynamics::CartPole, theta: f64, xdot_theta: f64, force: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    let (mc, mp, l, g) = (p.cart_mass, p.pole_mass, p.pole_length, p.gravity);
    let xdd = (force + mp * s * (l * xdot_theta * xdot_theta + g * c)) / (mc + mp * s * s);
    let tdd = (-g * s - c * xdd) / l;
    (xdd, tdd)
}

/// Classic RK4 on the cart-pole ODE, state `[x, θ, ẋ, θ̇]`.
pub fn cart_pole_rk4(model: &Model, mut y: [f64; 4], force: f64, h: f64, steps: usize) -> [f64; 4] {
    let System::CartPole(p) = model.system() else {
        panic!("cart-pole expected");
    };
    let f = |y: [f64; 4]| {
        let (xdd, tdd) = cart_pole_accel(p, y[1], y[3], force);
        [y[2], y[3], xdd, tdd]
    };
    let add = |a: [f64; 4], b: [f64; 4], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2], a[3] + s * b[3]];
    for _ in 0..steps {
        let k1 = f(y);
        let k2 = f(add(y, k1, h / 2.0));
        let k3 = f(add(y, k2, h / 2.0));
        let k4 = f(add(y, k3, h));
        for i in 0..4 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y
}

/// Random linear-quadratic problem: stable `A`, any `B`, SPD `Q`, `R`.
pub struct LqrInstance {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x0: DVector<f64>,
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.1
}

impl LqrInstance {
    pub fn random(rng: &mut ChaCha8Rng, nx: usize, nu: usize) -> Self {
        let mut a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0));
        let radius = a.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        if radius > 0.0 {
            a *= 0.95 / radius.max(0.95);
        }
        Self {
            b: DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-1.0..1.0)),
            q: random_spd(rng, nx),
            r: random_spd(rng, nu),
            x0: DVector::from_fn(nx, |_, _| rng.random_range(-2.0..2.0)),
            a,
        }
    }

    pub fn model(&self) -> Model {
        let nu = self.b.ncols();
        Model::linear(
            self.a.clone(),
            self.b.clone(),
            vec![f64::NEG_INFINITY; nu],
            vec![f64::INFINITY; nu],
        )
        .unwrap()
    }

    /// `Σ_{t=0}^{T} xᵀQx + uᵀRu` over the residual `[x; u]`.
    pub fn cost(&self) -> CostSpec {
        let (nx, nu) = (self.a.nrows(), self.b.ncols());
        CostSpec::new(
            vec![
                CostTerm::new("state", 1.0, Norm::Quadratic { weight_matrix: Some(self.q.clone()) }, 0, nx),
                CostTerm::new("control", 1.0, Norm::Quadratic { weight_matrix: Some(self.r.clone()) }, nx, nu),
            ],
            0.0,
        )
    }

    /// Optimal open-loop controls `u_0..u_T` from the backward Riccati
    /// recursion. The final control only pays `uᵀRu`, so `u_T = 0` and the
    /// terminal value is `P_T = Q`.
    pub fn riccati_controls(&self, horizon: usize) -> Vec<DVector<f64>> {
        let (a, b, q, r) = (&self.a, &self.b, &self.q, &self.r);
        let mut p = q.clone();
        let mut gains = vec![DMatrix::zeros(b.ncols(), a.nrows()); horizon];
        for t in (0..horizon).rev() {
            let btp = b.transpose() * &p;
            let k = -(r + &btp * b).lu().solve(&(&btp * a)).expect("R + BᵀPB invertible");
            p = q + a.transpose() * &p * a + a.transpose() * &p * b * &k;
            p = (&p + p.transpose()) * 0.5;
            gains[t] = k;
        }
        let mut x = self.x0.clone();
        let mut us = Vec::with_capacity(horizon + 1);
        for k in &gains {
            let u = k * &x;
            x = a * &x + b * &u;
            us.push(u);
        }
        us.push(DVector::zeros(b.ncols()));
        us
    }
}
