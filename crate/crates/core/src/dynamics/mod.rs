//! Analytic dynamics models behind a uniform `step` interface.
//!
//! A step maps `(x, u)` to the next state `x'` and a residual vector `r`
//! evaluated at the *input* state and control, mirroring a simulator that
//! computes sensors before integrating. Mechanical systems are integrated
//! with semi-implicit Euler: velocities are updated from the acceleration
//! first, positions from the new velocities second.

mod systems;

pub use systems::{wrap_angle, Acrobot, CartPole, Dims, Identity, LinearSystem, Particle, Pendulum, System};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Default finite-difference step for [`Model::fd_jacobians`].
pub const DEFAULT_FD_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub qpos: Vec<f64>,
    pub qvel: Vec<f64>,
    pub time: f64,
}

impl SimState {
    pub fn new(qpos: Vec<f64>, qvel: Vec<f64>, time: f64) -> Self {
        Self { qpos, qvel, time }
    }

    /// Flat `[qpos; qvel]` view used by the planners.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.qpos.len() + self.qvel.len());
        x.extend_from_slice(&self.qpos);
        x.extend_from_slice(&self.qvel);
        x
    }

    pub fn from_flat(x: &[f64], nq: usize, time: f64) -> Self {
        Self {
            qpos: x[..nq].to_vec(),
            qvel: x[nq..].to_vec(),
            time,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.time.is_finite() && self.qpos.iter().chain(&self.qvel).all(|v| v.is_finite())
    }
}

/// Dimensions, timestep and actuator limits of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub nq: usize,
    pub nv: usize,
    pub nu: usize,
    pub nr: usize,
    pub timestep: f64,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
}

impl ModelSpec {
    pub fn nx(&self) -> usize {
        self.nq + self.nv
    }

    pub fn clamp_control(&self, u: &mut [f64]) {
        for ((v, lo), hi) in u.iter_mut().zip(&self.control_lower).zip(&self.control_upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Midpoint of the control box; zero when zero is admissible.
    pub fn neutral_control(&self) -> Vec<f64> {
        self.control_lower
            .iter()
            .zip(&self.control_upper)
            .map(|(lo, hi)| {
                if *lo <= 0.0 && 0.0 <= *hi {
                    0.0
                } else {
                    0.5 * (lo + hi)
                }
            })
            .collect()
    }

    /// Midpoint of the control box, falling back to the neutral control on
    /// unbounded channels.
    pub fn midpoint_control(&self) -> Vec<f64> {
        let neutral = self.neutral_control();
        self.control_lower
            .iter()
            .zip(&self.control_upper)
            .zip(neutral)
            .map(|((lo, hi), n)| if lo.is_finite() && hi.is_finite() { 0.5 * (lo + hi) } else { n })
            .collect()
    }

    pub fn control_range(&self) -> Vec<f64> {
        self.control_upper
            .iter()
            .zip(&self.control_lower)
            .map(|(hi, lo)| hi - lo)
            .collect()
    }
}

/// Serialized form of a [`Model`] in task config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub timestep: f64,
    pub control_lower: Vec<f64>,
    pub control_upper: Vec<f64>,
    pub system: System,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfig", into = "ModelConfig")]
pub struct Model {
    spec: ModelSpec,
    system: System,
}

impl TryFrom<ModelConfig> for Model {
    type Error = Error;

    fn try_from(cfg: ModelConfig) -> Result<Self> {
        Model::new(cfg.name, cfg.system, cfg.timestep, cfg.control_lower, cfg.control_upper)
    }
}

impl From<Model> for ModelConfig {
    fn from(m: Model) -> Self {
        ModelConfig {
            name: m.spec.name,
            timestep: m.spec.timestep,
            control_lower: m.spec.control_lower,
            control_upper: m.spec.control_upper,
            system: m.system,
        }
    }
}

/// Jacobians of one step: `A = ∂x'/∂x`, `B = ∂x'/∂u`, `C = ∂r/∂x`, `D = ∂r/∂u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobians {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        system: System,
        timestep: f64,
        control_lower: Vec<f64>,
        control_upper: Vec<f64>,
    ) -> Result<Self> {
        system.validate()?;
        let dims = system.dims();
        check_len("control_lower", dims.nu, control_lower.len())?;
        check_len("control_upper", dims.nu, control_upper.len())?;
        if !(timestep > 0.0 && timestep.is_finite()) {
            return Err(Error::InvalidConfig("timestep must be positive".into()));
        }
        if control_lower.iter().zip(&control_upper).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidConfig("control_lower must not exceed control_upper".into()));
        }
        if dims.nr == 0 {
            return Err(Error::InvalidConfig("model needs at least one residual".into()));
        }
        Ok(Self {
            spec: ModelSpec {
                name: name.into(),
                nq: dims.nq,
                nv: dims.nv,
                nu: dims.nu,
                nr: dims.nr,
                timestep,
                control_lower,
                control_upper,
            },
            system,
        })
    }

    pub fn particle() -> Self {
        Self::new("particle", System::Particle(Particle::default()), 0.01, vec![-1.0; 2], vec![1.0; 2])
            .expect("valid built-in")
    }

    /// Torque-limited so the pendulum cannot be lifted directly (4 < m g l).
    pub fn pendulum() -> Self {
        Self::new("pendulum", System::Pendulum(Pendulum::default()), 0.01, vec![-4.0], vec![4.0])
            .expect("valid built-in")
    }

    pub fn cart_pole() -> Self {
        Self::new("cart-pole", System::CartPole(CartPole::default()), 0.01, vec![-10.0], vec![10.0])
            .expect("valid built-in")
    }

    pub fn acrobot() -> Self {
        Self::new("acrobot", System::Acrobot(Acrobot::default()), 0.01, vec![-5.0], vec![5.0])
            .expect("valid built-in")
    }

    /// Discrete linear system `x' = A x + B u` with residual `[x; u]`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, control_lower: Vec<f64>, control_upper: Vec<f64>) -> Result<Self> {
        Self::new("linear", System::Linear(LinearSystem { a, b }), 1.0, control_lower, control_upper)
    }

    pub fn identity(nx: usize, nu: usize) -> Result<Self> {
        Self::new(
            "identity",
            System::Identity(Identity { nx, nu }),
            0.01,
            vec![f64::NEG_INFINITY; nu],
            vec![f64::INFINITY; nu],
        )
    }

    /// Default instance of a built-in model.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "particle" => Some(Self::particle()),
            "pendulum" => Some(Self::pendulum()),
            "cart-pole" | "cartpole" => Some(Self::cart_pole()),
            "acrobot" => Some(Self::acrobot()),
            _ => None,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    pub fn timestep(&self) -> f64 {
        self.spec.timestep
    }

    pub fn goal(&self) -> &[f64] {
        self.system.goal()
    }

    pub fn set_goal(&mut self, goal: &[f64]) -> Result<()> {
        if goal.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                model: self.spec.name.clone(),
                what: "goal",
            });
        }
        self.system.set_goal(goal)
    }

    pub fn goal_error(&self, state: &SimState) -> f64 {
        self.system.goal_error(&state.qpos, &state.qvel)
    }

    /// State at which the task residuals vanish, at time zero.
    pub fn goal_state(&self) -> SimState {
        let (q, v) = self.system.goal_state();
        SimState::new(q, v, 0.0)
    }

    /// A state of the right shape with everything zero.
    pub fn zero_state(&self) -> SimState {
        SimState::new(vec![0.0; self.spec.nq], vec![0.0; self.spec.nv], 0.0)
    }

    fn check_inputs(&self, qpos: &[f64], qvel: &[f64], ctrl: &[f64]) -> Result<()> {
        check_len("qpos", self.spec.nq, qpos.len())?;
        check_len("qvel", self.spec.nv, qvel.len())?;
        check_len("control", self.spec.nu, ctrl.len())?;
        let nonfinite = |what| Error::NonFinite {
            model: self.spec.name.clone(),
            what,
        };
        if qpos.iter().chain(qvel).any(|v| !v.is_finite()) {
            return Err(nonfinite("state"));
        }
        if ctrl.iter().any(|v| !v.is_finite()) {
            return Err(nonfinite("control"));
        }
        Ok(())
    }

    /// Advances the state by one timestep and returns the residual at the
    /// input `(state, ctrl)`.
    pub fn step(&self, state: &SimState, ctrl: &[f64]) -> Result<(SimState, Vec<f64>)> {
        self.check_inputs(&state.qpos, &state.qvel, ctrl)?;
        if !state.time.is_finite() {
            return Err(Error::NonFinite {
                model: self.spec.name.clone(),
                what: "time",
            });
        }
        let mut residual = vec![0.0; self.spec.nr];
        self.system.residual(&state.qpos, &state.qvel, ctrl, &mut residual);
        let mut next = state.clone();
        self.system.integrate(self.spec.timestep, &mut next.qpos, &mut next.qvel, ctrl);
        next.time = state.time + self.spec.timestep;
        Ok((next, residual))
    }

    /// Residual only, without integrating.
    pub fn residual(&self, state: &SimState, ctrl: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(&state.qpos, &state.qvel, ctrl)?;
        let mut residual = vec![0.0; self.spec.nr];
        self.system.residual(&state.qpos, &state.qvel, ctrl, &mut residual);
        Ok(residual)
    }

    /// Flat-state step used by the derivative code. Inputs are assumed valid.
    pub(crate) fn step_flat(&self, x: &[f64], u: &[f64], x_next: &mut [f64], residual: &mut [f64]) {
        let nq = self.spec.nq;
        self.system.residual(&x[..nq], &x[nq..], u, residual);
        x_next.copy_from_slice(x);
        let (qpos, qvel) = x_next.split_at_mut(nq);
        self.system.integrate(self.spec.timestep, qpos, qvel, u);
    }

    /// Centered finite-difference Jacobians, one perturbed pair of steps per
    /// input coordinate. Cost scales with `nx + nu`; residual outputs come
    /// along for free.
    pub fn fd_jacobians(&self, state: &SimState, ctrl: &[f64], eps: f64) -> Result<Jacobians> {
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig("finite-difference eps must be positive".into()));
        }
        self.check_inputs(&state.qpos, &state.qvel, ctrl)?;
        let spec = &self.spec;
        let (nx, nu, nr) = (spec.nx(), spec.nu, spec.nr);
        let x = state.to_flat();

        let mut jac = Jacobians {
            a: DMatrix::zeros(nx, nx),
            b: DMatrix::zeros(nx, nu),
            c: DMatrix::zeros(nr, nx),
            d: DMatrix::zeros(nr, nu),
        };
        let mut xp = vec![0.0; nx];
        let mut xm = vec![0.0; nx];
        let mut rp = vec![0.0; nr];
        let mut rm = vec![0.0; nr];
        let scale = 0.5 / eps;

        let mut xin = x.clone();
        for i in 0..nx {
            xin[i] = x[i] + eps;
            self.step_flat(&xin, ctrl, &mut xp, &mut rp);
            xin[i] = x[i] - eps;
            self.step_flat(&xin, ctrl, &mut xm, &mut rm);
            xin[i] = x[i];
            for k in 0..nx {
                jac.a[(k, i)] = (xp[k] - xm[k]) * scale;
            }
            for k in 0..nr {
                jac.c[(k, i)] = (rp[k] - rm[k]) * scale;
            }
        }

        let mut uin = ctrl.to_vec();
        for j in 0..nu {
            uin[j] = ctrl[j] + eps;
            self.step_flat(&x, &uin, &mut xp, &mut rp);
            uin[j] = ctrl[j] - eps;
            self.step_flat(&x, &uin, &mut xm, &mut rm);
            uin[j] = ctrl[j];
            for k in 0..nx {
                jac.b[(k, j)] = (xp[k] - xm[k]) * scale;
            }
            for k in 0..nr {
                jac.d[(k, j)] = (rp[k] - rm[k]) * scale;
            }
        }

        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&jac.a) && finite(&jac.b) && finite(&jac.c) && finite(&jac.d)) {
            return Err(Error::Diverged("finite-difference Jacobians"));
        }
        Ok(jac)
    }

    /// Adds a velocity impulse to the state.
    pub fn apply_impulse(&self, state: &SimState, impulse: &[f64]) -> Result<SimState> {
        check_len("impulse", self.spec.nv, impulse.len())?;
        if impulse.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                model: self.spec.name.clone(),
                what: "impulse",
            });
        }
        let mut next = state.clone();
        for (v, dv) in next.qvel.iter_mut().zip(impulse) {
            *v += dv;
        }
        Ok(next)
    }
}
