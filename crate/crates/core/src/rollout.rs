//! Forward simulation over a finite horizon and per-step linearization.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{Model, SimState};
use crate::error::{Error, Result};
use crate::objective::{project_psd, total_objective, CostDerivatives, CostSpec};

/// States, controls, residuals and costs for `t = 0..=T`.
///
/// `states[t]` is the flat `[qpos; qvel]` at `times[t]`; the cost at step
/// `t` is `c(x_t, u_t)` and `total = Σ_t c_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub nq: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub total: f64,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.costs.len().saturating_sub(1)
    }

    pub fn state(&self, t: usize) -> SimState {
        SimState::from_flat(&self.states[t], self.nq, self.times[t])
    }
}

/// Rolls `model` forward `horizon` steps from `x0`. The policy writes the
/// control for step `t` given `(t, time, x_t)`; controls are clamped to the
/// model's bounds before use.
pub fn simulate<P>(model: &Model, cost: &CostSpec, x0: &SimState, horizon: usize, mut policy: P) -> Result<Rollout>
where
    P: FnMut(usize, f64, &[f64], &mut [f64]),
{
    let spec = model.spec();
    let (nx, nu, nr) = (spec.nx(), spec.nu, spec.nr);
    if !x0.is_finite() {
        return Err(Error::Diverged("initial state"));
    }
    let h = spec.timestep;
    let steps = horizon + 1;
    let mut rollout = Rollout {
        nq: spec.nq,
        times: Vec::with_capacity(steps),
        states: Vec::with_capacity(steps),
        controls: Vec::with_capacity(steps),
        residuals: Vec::with_capacity(steps),
        costs: Vec::with_capacity(steps),
        total: 0.0,
    };
    let mut x = x0.to_flat();
    if x.len() != nx {
        return Err(Error::Dimension {
            what: "initial state",
            expected: nx,
            got: x.len(),
        });
    }
    let mut next = vec![0.0; nx];
    for t in 0..steps {
        let time = x0.time + t as f64 * h;
        let mut u = vec![0.0; nu];
        policy(t, time, &x, &mut u);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("rollout control"));
        }
        spec.clamp_control(&mut u);
        let mut r = vec![0.0; nr];
        model.step_flat(&x, &u, &mut next, &mut r);
        let c = cost.cost(&r);
        if !c.is_finite() {
            return Err(Error::Diverged("rollout cost"));
        }
        rollout.times.push(time);
        rollout.states.push(x.clone());
        rollout.controls.push(u);
        rollout.residuals.push(r);
        rollout.costs.push(c);
        if t + 1 < steps {
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged("rollout state"));
            }
            std::mem::swap(&mut x, &mut next);
        }
    }
    rollout.total = total_objective(&rollout.costs);
    Ok(rollout)
}

/// Total cost with failed or non-finite rollouts scored as `+∞`.
pub fn score(result: &Result<Rollout>) -> f64 {
    match result {
        Ok(r) if r.total.is_finite() => r.total,
        _ => f64::INFINITY,
    }
}

/// Index of the smallest score; the earliest index wins ties, so a nominal
/// placed first is kept unless strictly beaten. `NaN` never wins.
pub fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s < scores[best] || scores[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Dynamics and cost derivatives at one step of a rollout.
#[derive(Clone, Debug)]
pub struct StepLinearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub cost: CostDerivatives,
}

/// Finite-difference dynamics Jacobians plus analytic cost derivatives at
/// every `(x_t, u_t)` of the rollout. Steps are linearized in parallel.
pub fn linearize(model: &Model, cost: &CostSpec, rollout: &Rollout, eps: f64) -> Result<Vec<StepLinearization>> {
    (0..rollout.costs.len())
        .into_par_iter()
        .map(|t| {
            let state = rollout.state(t);
            let jac = model.fd_jacobians(&state, &rollout.controls[t], eps)?;
            let cost = cost.derivatives(&rollout.residuals[t], &jac.c, &jac.d)?;
            Ok(StepLinearization {
                a: jac.a,
                b: jac.b,
                cost,
            })
        })
        .collect()
}

/// Projects the joint `(x, u)` cost Hessian of a step onto the PSD cone.
pub(crate) fn psd_cost_blocks(d: &CostDerivatives) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (nx, nu) = (d.cxx.nrows(), d.cuu.nrows());
    let mut joint = DMatrix::zeros(nx + nu, nx + nu);
    joint.view_mut((0, 0), (nx, nx)).copy_from(&d.cxx);
    joint.view_mut((nx, nx), (nu, nu)).copy_from(&d.cuu);
    joint.view_mut((0, nx), (nx, nu)).copy_from(&d.cxu);
    joint.view_mut((nx, 0), (nu, nx)).copy_from(&d.cxu.transpose());
    let joint = project_psd(&joint);
    (
        joint.view((0, 0), (nx, nx)).into_owned(),
        joint.view((nx, nx), (nu, nu)).into_owned(),
        joint.view((0, nx), (nx, nu)).into_owned(),
    )
}

pub(crate) fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
