//! Equations of motion for the built-in systems.
//!
//! Every mechanical system is written as `M(q) q̈ = τ(q, q̇, u)` and
//! integrated by the caller with semi-implicit Euler. Angles are measured
//! from the downward hanging configuration, so "upright" is `θ = π`.
//!
//! * **particle**: planar point mass, `q̈ = u / m`.
//! * **pendulum**: point mass on a massless rod,
//!   `m l² θ̈ = u − m g l sin θ − b θ̇`.
//! * **cart-pole**: cart of mass `M` with a point-mass pole,
//!   ```text
//!   (M + m) ẍ + m l cos θ θ̈ = F + m l θ̇² sin θ
//!   m l cos θ ẍ + m l² θ̈    = −m g l sin θ
//!   ```
//! * **acrobot**: two-link arm actuated at the elbow,
//!   `M(q) q̈ + C(q, q̇) q̇ = τ_g(q) + [0, u]ᵀ − b q̇` with the usual
//!   Spong mass matrix (inertias taken about the joints).
//! * **linear**: discrete map `x' = A x + B u` (no integrator).
//! * **identity**: `x' = x`, residual `r = x`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{check_len, Error, Result};
use crate::serde_util::matrix_rows;

/// Wraps an angle to `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub nq: usize,
    pub nv: usize,
    pub nu: usize,
    pub nr: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Particle {
    pub mass: f64,
    /// Target position, `[x, y]`.
    pub goal: Vec<f64>,
}

impl Default for Particle {
    fn default() -> Self {
        Self {
            mass: 1.0,
            goal: vec![0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pendulum {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartPole {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub gravity: f64,
    /// Target cart position, `[x]`.
    pub goal: Vec<f64>,
}

impl Default for CartPole {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_length: 0.5,
            gravity: 9.81,
            goal: vec![0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Acrobot {
    pub link_mass: [f64; 2],
    pub link_length: [f64; 2],
    /// Distance from each joint to its link's centre of mass.
    pub com_offset: [f64; 2],
    /// Link inertia about its own joint.
    pub inertia: [f64; 2],
    pub gravity: f64,
    pub damping: f64,
}

impl Default for Acrobot {
    fn default() -> Self {
        Self {
            link_mass: [1.0, 1.0],
            link_length: [1.0, 1.0],
            com_offset: [0.5, 0.5],
            inertia: [1.0 / 3.0, 1.0 / 3.0],
            gravity: 9.81,
            damping: 0.05,
        }
    }
}

impl Acrobot {
    pub fn tip(&self, q: &[f64]) -> [f64; 2] {
        let [l1, l2] = self.link_length;
        let (s1, c1) = q[0].sin_cos();
        let (s12, c12) = (q[0] + q[1]).sin_cos();
        [l1 * s1 + l2 * s12, -l1 * c1 - l2 * c12]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystem {
    #[serde(with = "matrix_rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub b: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Identity {
    pub nx: usize,
    pub nu: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum System {
    Particle(Particle),
    Pendulum(Pendulum),
    CartPole(CartPole),
    Acrobot(Acrobot),
    Linear(LinearSystem),
    Identity(Identity),
}

impl System {
    pub fn dims(&self) -> Dims {
        match self {
            System::Particle(_) => Dims { nq: 2, nv: 2, nu: 2, nr: 6 },
            System::Pendulum(_) => Dims { nq: 1, nv: 1, nu: 1, nr: 3 },
            System::CartPole(_) => Dims { nq: 2, nv: 2, nu: 1, nr: 5 },
            System::Acrobot(_) => Dims { nq: 2, nv: 2, nu: 1, nr: 5 },
            System::Linear(s) => Dims {
                nq: s.a.nrows(),
                nv: 0,
                nu: s.b.ncols(),
                nr: s.a.nrows() + s.b.ncols(),
            },
            System::Identity(s) => Dims {
                nq: s.nx,
                nv: 0,
                nu: s.nu,
                nr: s.nx,
            },
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive")))
            }
        };
        match self {
            System::Particle(p) => {
                positive("mass", p.mass)?;
                check_len("particle goal", 2, p.goal.len())
            }
            System::Pendulum(p) => {
                positive("mass", p.mass)?;
                positive("length", p.length)
            }
            System::CartPole(p) => {
                positive("cart_mass", p.cart_mass)?;
                positive("pole_mass", p.pole_mass)?;
                positive("pole_length", p.pole_length)?;
                check_len("cart-pole goal", 1, p.goal.len())
            }
            System::Acrobot(p) => {
                for i in 0..2 {
                    positive("link_mass", p.link_mass[i])?;
                    positive("link_length", p.link_length[i])?;
                    positive("inertia", p.inertia[i])?;
                }
                Ok(())
            }
            System::Linear(s) => {
                if !s.a.is_square() || s.a.nrows() == 0 {
                    return Err(Error::InvalidConfig("A must be square and non-empty".into()));
                }
                check_len("B rows", s.a.nrows(), s.b.nrows())
            }
            System::Identity(s) => {
                if s.nx == 0 {
                    return Err(Error::InvalidConfig("identity model needs nx >= 1".into()));
                }
                Ok(())
            }
        }
    }

    /// Advances `(qpos, qvel)` by one step of length `h`.
    pub(crate) fn integrate(&self, h: f64, qpos: &mut [f64], qvel: &mut [f64], ctrl: &[f64]) {
        match self {
            System::Linear(s) => {
                let n = qpos.len();
                let mut next = vec![0.0; n];
                for (i, out) in next.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += s.a[(i, j)] * qpos[j];
                    }
                    for (j, u) in ctrl.iter().enumerate() {
                        acc += s.b[(i, j)] * u;
                    }
                    *out = acc;
                }
                qpos.copy_from_slice(&next);
            }
            System::Identity(_) => {}
            _ => {
                let mut qacc = [0.0; 2];
                let qacc = &mut qacc[..qvel.len()];
                self.acceleration(qpos, qvel, ctrl, qacc);
                for (v, a) in qvel.iter_mut().zip(qacc.iter()) {
                    *v += h * a;
                }
                for (q, v) in qpos.iter_mut().zip(qvel.iter()) {
                    *q += h * v;
                }
            }
        }
    }

    fn acceleration(&self, q: &[f64], v: &[f64], u: &[f64], qacc: &mut [f64]) {
        match self {
            System::Particle(p) => {
                qacc[0] = u[0] / p.mass;
                qacc[1] = u[1] / p.mass;
            }
            System::Pendulum(p) => {
                let ml = p.mass * p.length;
                qacc[0] = (u[0] - ml * p.gravity * q[0].sin() - p.damping * v[0])
                    / (ml * p.length);
            }
            System::CartPole(p) => {
                let (s, c) = q[1].sin_cos();
                let (mc, mp, l) = (p.cart_mass, p.pole_mass, p.pole_length);
                let m11 = mc + mp;
                let m12 = mp * l * c;
                let m22 = mp * l * l;
                let f1 = u[0] + mp * l * v[1] * v[1] * s;
                let f2 = -mp * p.gravity * l * s;
                solve2(m11, m12, m22, f1, f2, qacc);
            }
            System::Acrobot(p) => {
                let [m1, m2] = p.link_mass;
                let [l1, _] = p.link_length;
                let [lc1, lc2] = p.com_offset;
                let [i1, i2] = p.inertia;
                let g = p.gravity;
                let (s1, _) = q[0].sin_cos();
                let (s2, c2) = q[1].sin_cos();
                let s12 = (q[0] + q[1]).sin();
                let coupling = m2 * l1 * lc2;

                let m11 = i1 + i2 + m2 * l1 * l1 + 2.0 * coupling * c2;
                let m12 = i2 + coupling * c2;
                let m22 = i2;

                let bias1 = -2.0 * coupling * s2 * v[0] * v[1] - coupling * s2 * v[1] * v[1];
                let bias2 = coupling * s2 * v[0] * v[0];
                let grav1 = -m1 * g * lc1 * s1 - m2 * g * (l1 * s1 + lc2 * s12);
                let grav2 = -m2 * g * lc2 * s12;

                let f1 = grav1 - bias1 - p.damping * v[0];
                let f2 = grav2 - bias2 - p.damping * v[1] + u[0];
                solve2(m11, m12, m22, f1, f2, qacc);
            }
            System::Linear(_) | System::Identity(_) => unreachable!("discrete-time system"),
        }
    }

    pub(crate) fn residual(&self, q: &[f64], v: &[f64], u: &[f64], out: &mut [f64]) {
        match self {
            System::Particle(p) => {
                out[0] = q[0] - p.goal[0];
                out[1] = q[1] - p.goal[1];
                out[2] = v[0];
                out[3] = v[1];
                out[4] = u[0];
                out[5] = u[1];
            }
            System::Pendulum(_) => {
                // Normalized tip height below the upright position.
                out[0] = -(q[0].cos() + 1.0);
                out[1] = v[0];
                out[2] = u[0];
            }
            System::CartPole(p) => {
                out[0] = q[0] - p.goal[0];
                out[1] = -(q[1].cos() + 1.0);
                out[2] = v[0];
                out[3] = v[1];
                out[4] = u[0];
            }
            System::Acrobot(p) => {
                let tip = p.tip(q);
                out[0] = tip[0];
                out[1] = tip[1] - (p.link_length[0] + p.link_length[1]);
                out[2] = v[0];
                out[3] = v[1];
                out[4] = u[0];
            }
            System::Linear(_) => {
                out[..q.len()].copy_from_slice(q);
                out[q.len()..].copy_from_slice(u);
            }
            System::Identity(_) => out.copy_from_slice(q),
        }
    }

    pub fn goal(&self) -> &[f64] {
        match self {
            System::Particle(p) => &p.goal,
            System::CartPole(p) => &p.goal,
            _ => &[],
        }
    }

    pub(crate) fn set_goal(&mut self, goal: &[f64]) -> Result<()> {
        match self {
            System::Particle(p) => {
                check_len("particle goal", 2, goal.len())?;
                p.goal = goal.to_vec();
            }
            System::CartPole(p) => {
                check_len("cart-pole goal", 1, goal.len())?;
                p.goal = goal.to_vec();
            }
            _ => check_len("goal", 0, goal.len())?,
        }
        Ok(())
    }

    /// Positions and velocities at which every residual vanishes under zero
    /// control.
    pub(crate) fn goal_state(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dims();
        let mut q = vec![0.0; d.nq];
        match self {
            System::Particle(p) => q.copy_from_slice(&p.goal),
            System::Pendulum(_) => q[0] = PI,
            System::CartPole(p) => {
                q[0] = p.goal[0];
                q[1] = PI;
            }
            System::Acrobot(_) => q[0] = PI,
            System::Linear(_) | System::Identity(_) => {}
        }
        (q, vec![0.0; d.nv])
    }

    /// Scalar distance from the task goal used for success checks.
    pub(crate) fn goal_error(&self, q: &[f64], v: &[f64]) -> f64 {
        let _ = v;
        match self {
            System::Particle(p) => (q[0] - p.goal[0]).hypot(q[1] - p.goal[1]),
            System::Pendulum(_) => wrap_angle(q[0] - PI).abs(),
            System::CartPole(_) => wrap_angle(q[1] - PI).abs(),
            System::Acrobot(p) => {
                let tip = p.tip(q);
                tip[0].hypot(tip[1] - (p.link_length[0] + p.link_length[1]))
            }
            System::Linear(_) | System::Identity(_) => q.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// Solves the symmetric 2×2 system `[[a, b], [b, c]] x = [f1, f2]`.
fn solve2(a: f64, b: f64, c: f64, f1: f64, f2: f64, out: &mut [f64]) {
    let det = a * c - b * b;
    out[0] = (c * f1 - b * f2) / det;
    out[1] = (a * f2 - b * f1) / det;
}
