//! iLQG (Gauss–Newton DDP) over the direct control sequence.
//!
//! The backward pass runs the Riccati-like recursion on the local
//! quadratic model of the Q-function,
//!
//! ```text
//! Q_x  = c_x  + Aᵀ V_x          Q_u  = c_u  + Bᵀ V_x
//! Q_xx = c_xx + Aᵀ V_xx A       Q_uu = c_uu + Bᵀ V_xx B
//! Q_ux = c_uxᵀ + Bᵀ V_xx A
//! k = −(Q_uu + μI)⁻¹ Q_u        K = −(Q_uu + μI)⁻¹ Q_ux
//! ```
//!
//! starting from `V_{T+1} = 0`. Action limits are handled by clamping
//! `ū + k` to the box, fixing the clamped coordinates, re-solving the free
//! ones and zeroing the rows of `K` that belong to clamped coordinates.
//! Regularization `μ` sits on `Q_uu` only. It grows by `mu_increase`
//! (at least to `mu_min`) whenever a factorization fails or the line search
//! finds no improvement, and shrinks by `mu_decrease` after a success,
//! snapping to zero once it drops below `mu_min`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{best_worst, neutral_plan, Feedback, IterationReport, Planner, PlannerKind, PlannerSettings, Policy};
use crate::dynamics::{Model, ModelSpec, SimState};
use crate::error::{Error, Result};
use crate::objective::CostSpec;
use crate::planner::IlqgSettings;
use crate::rollout::{argmin, dvec, linearize, psd_cost_blocks, score, simulate, Rollout, StepLinearization};
use crate::spline::{Interpolation, SplinePlan};

/// Nominal trajectory with time-varying gains: `u_t = ū_t + K_t (x_t − x̄_t) + α k_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackPolicy {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub improvements: Vec<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct BackwardPass {
    pub policy: FeedbackPolicy,
    /// Predicted decrease of `J` for a full step (`α = 1`), never negative.
    pub expected_improvement: f64,
    /// Regularization the pass succeeded with.
    pub regularization: f64,
}

/// Adaptive `μ` shared across iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Regularization {
    pub mu: f64,
}

impl Regularization {
    pub fn increase(&mut self, s: &IlqgSettings) {
        self.mu = (self.mu * s.mu_increase).max(s.mu_min);
    }

    pub fn decrease(&mut self, s: &IlqgSettings) {
        self.mu /= s.mu_decrease;
        if self.mu < s.mu_min {
            self.mu = 0.0;
        }
    }
}

/// Step solution at one knot, `None` if `Q_uu + μI` is not positive definite.
struct StepSolution {
    k: DVector<f64>,
    gain: DMatrix<f64>,
}

fn solve_step(
    quu: &DMatrix<f64>,
    qu: &DVector<f64>,
    qux: &DMatrix<f64>,
    mu: f64,
    ubar: &[f64],
    spec: &ModelSpec,
) -> Option<StepSolution> {
    let nu = qu.len();
    let nx = qux.ncols();
    let mut reg = quu + DMatrix::identity(nu, nu) * mu;
    reg = (&reg + reg.transpose()) * 0.5;
    let chol = reg.clone().cholesky()?;
    let mut k = -chol.solve(qu);
    let mut gain = -chol.solve(qux);

    let bounded = |i: usize, v: f64| v.clamp(spec.control_lower[i], spec.control_upper[i]);
    let mut clamped = vec![false; nu];
    // The clamped set only grows, so this settles within nu passes.
    for _ in 0..nu {
        let mut changed = false;
        for i in 0..nu {
            if !clamped[i] && bounded(i, ubar[i] + k[i]) != ubar[i] + k[i] {
                clamped[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let free: Vec<usize> = (0..nu).filter(|&i| !clamped[i]).collect();
        for i in 0..nu {
            if clamped[i] {
                k[i] = bounded(i, ubar[i] + k[i]) - ubar[i];
                gain.row_mut(i).fill(0.0);
            }
        }
        if free.is_empty() {
            break;
        }
        let nf = free.len();
        let reg_ff = DMatrix::from_fn(nf, nf, |a, b| reg[(free[a], free[b])]);
        let chol_ff = reg_ff.cholesky()?;
        let mut rhs = DVector::from_fn(nf, |a, _| qu[free[a]]);
        for (a, &i) in free.iter().enumerate() {
            for j in (0..nu).filter(|&j| clamped[j]) {
                rhs[a] += reg[(i, j)] * k[j];
            }
        }
        let kf = -chol_ff.solve(&rhs);
        let qux_f = DMatrix::from_fn(nf, nx, |a, c| qux[(free[a], c)]);
        let gf = -chol_ff.solve(&qux_f);
        for (a, &i) in free.iter().enumerate() {
            k[i] = kf[a];
            gain.row_mut(i).copy_from(&gf.row(a));
        }
    }
    Some(StepSolution { k, gain })
}

fn attempt(nominal: &Rollout, steps: &[StepLinearization], spec: &ModelSpec, mu: f64) -> Option<(FeedbackPolicy, f64)> {
    let n = steps.len();
    let nx = spec.nx();
    let mut vx = DVector::<f64>::zeros(nx);
    let mut vxx = DMatrix::<f64>::zeros(nx, nx);
    let mut gains = vec![DMatrix::zeros(spec.nu, nx); n];
    let mut improvements = vec![DVector::zeros(spec.nu); n];
    let mut expected = 0.0;

    for t in (0..n).rev() {
        let step = &steps[t];
        let (a, b) = (&step.a, &step.b);
        let (cxx, cuu, cxu) = psd_cost_blocks(&step.cost);
        let vxx_a = &vxx * a;
        let vxx_b = &vxx * b;
        let qx = &step.cost.cx + a.transpose() * &vx;
        let qu = &step.cost.cu + b.transpose() * &vx;
        let qxx = cxx + a.transpose() * &vxx_a;
        let quu = cuu + b.transpose() * &vxx_b;
        let qux = cxu.transpose() + b.transpose() * &vxx_a;

        let sol = solve_step(&quu, &qu, &qux, mu, &nominal.controls[t], spec)?;
        let (mut k, gain) = (sol.k, sol.gain);
        let mut decrease = k.dot(&qu) + 0.5 * k.dot(&(&quu * &k));
        if decrease > 0.0 {
            // Clamping can leave a step the local model does not endorse.
            k.fill(0.0);
            decrease = 0.0;
        }
        expected -= decrease;

        let quu_k = &quu * &k;
        vx = qx + gain.transpose() * &quu_k + gain.transpose() * &qu + qux.transpose() * &k;
        let mut next_vxx = qxx + gain.transpose() * &quu * &gain + gain.transpose() * &qux + qux.transpose() * &gain;
        next_vxx = (&next_vxx + next_vxx.transpose()) * 0.5;
        vxx = next_vxx;
        if vx.iter().chain(vxx.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        gains[t] = gain;
        improvements[t] = k;
    }
    let policy = FeedbackPolicy {
        times: nominal.times.clone(),
        states: nominal.states.clone(),
        controls: nominal.controls.clone(),
        gains,
        improvements,
    };
    Some((policy, expected))
}

/// Backward pass with regularization retries. Fails once `μ` would exceed
/// `mu_max`.
pub fn backward_pass(
    nominal: &Rollout,
    steps: &[StepLinearization],
    spec: &ModelSpec,
    settings: &IlqgSettings,
    reg: &mut Regularization,
) -> Result<BackwardPass> {
    loop {
        if let Some((policy, expected_improvement)) = attempt(nominal, steps, spec, reg.mu) {
            return Ok(BackwardPass {
                policy,
                expected_improvement,
                regularization: reg.mu,
            });
        }
        reg.increase(settings);
        if reg.mu > settings.mu_max {
            return Err(Error::Regularization(reg.mu));
        }
    }
}

/// Forward simulation under the feedback policy with step size `alpha`.
pub fn rollout_feedback(
    policy: &FeedbackPolicy,
    alpha: f64,
    x0: &SimState,
    model: &Model,
    cost: &CostSpec,
) -> Result<Rollout> {
    let horizon = policy.controls.len().saturating_sub(1);
    simulate(model, cost, x0, horizon, |t, _, x, u| {
        let dx = dvec(x) - dvec(&policy.states[t]);
        let du = &policy.gains[t] * dx;
        for i in 0..u.len() {
            u[i] = policy.controls[t][i] + du[i] + alpha * policy.improvements[t][i];
        }
    })
}

/// Line-search grid `1, ½, ¼, …` down to `alpha_min`, at most `max` entries.
pub fn alpha_grid(alpha_min: f64, max: usize) -> Vec<f64> {
    let mut alphas = Vec::new();
    let mut a = 1.0;
    while a >= alpha_min && alphas.len() < max {
        alphas.push(a);
        a *= 0.5;
    }
    alphas
}

/// Open-loop rollout of a direct control sequence (knot `t` drives step `t`).
pub fn rollout_sequence(plan: &SplinePlan, x0: &SimState, model: &Model, cost: &CostSpec, horizon: usize) -> Result<Rollout> {
    let last = plan.num_knots() - 1;
    simulate(model, cost, x0, horizon, |t, _, _, u| u.copy_from_slice(plan.knot(t.min(last))))
}

#[derive(Clone, Debug)]
pub struct IlqgIteration {
    /// New nominal control sequence (zero-order knots at the step times).
    pub plan: SplinePlan,
    /// Feedback policy around the new nominal.
    pub policy: FeedbackPolicy,
    pub best: usize,
    /// Index 0 is the nominal, then one entry per line-search step.
    pub scores: Vec<f64>,
    pub expected_improvement: f64,
    pub regularization: f64,
}

fn sequence_from_rollout(rollout: &Rollout) -> Result<SplinePlan> {
    let dim = rollout.controls.first().map_or(0, Vec::len);
    let values = rollout.controls.concat();
    SplinePlan::new(rollout.times.clone(), values, dim, Interpolation::Zero)
}

/// Nominal rollout, derivatives, backward pass, parallel line search; the
/// nominal wins ties. `reg` is adapted in place.
pub fn plan_iteration(
    controls: &SplinePlan,
    x0: &SimState,
    model: &Model,
    cost: &CostSpec,
    settings: &PlannerSettings,
    reg: &mut Regularization,
) -> Result<IlqgIteration> {
    let ilqg = &settings.ilqg;
    let nominal = rollout_sequence(controls, x0, model, cost, settings.horizon)?;
    let steps = linearize(model, cost, &nominal, settings.fd_eps)?;
    let pass = backward_pass(&nominal, &steps, model.spec(), ilqg, reg)?;

    let alphas = alpha_grid(ilqg.alpha_min, ilqg.max_alphas);
    let trials: Vec<Result<Rollout>> = alphas
        .par_iter()
        .map(|&a| rollout_feedback(&pass.policy, a, x0, model, cost))
        .collect();
    let mut scores = vec![nominal.total];
    scores.extend(trials.iter().map(score));
    let best = argmin(&scores);
    if best > 0 {
        reg.decrease(ilqg);
    } else {
        reg.increase(ilqg);
    }

    let best_rollout = if best == 0 {
        &nominal
    } else {
        trials[best - 1].as_ref().expect("finite score implies success")
    };
    let mut policy = pass.policy;
    policy.states = best_rollout.states.clone();
    policy.controls = best_rollout.controls.clone();
    Ok(IlqgIteration {
        plan: sequence_from_rollout(best_rollout)?,
        policy,
        best,
        scores,
        expected_improvement: pass.expected_improvement,
        regularization: pass.regularization,
    })
}

#[derive(Debug)]
pub struct IlqgPlanner {
    settings: PlannerSettings,
    plan: SplinePlan,
    feedback: Option<Feedback>,
    reg: Regularization,
}

impl IlqgPlanner {
    pub fn new(settings: PlannerSettings, model: &Model) -> Self {
        Self {
            settings,
            plan: neutral_plan(model.spec(), 0.0, Interpolation::Zero),
            feedback: None,
            reg: Regularization::default(),
        }
    }

    pub fn regularization(&self) -> f64 {
        self.reg.mu
    }

    fn step_grid(&self, model: &Model, time: f64) -> Vec<f64> {
        let h = model.timestep();
        (0..=self.settings.horizon).map(|t| time + t as f64 * h).collect()
    }
}

impl Planner for IlqgPlanner {
    fn kind(&self) -> PlannerKind {
        PlannerKind::Ilqg
    }

    fn iterate(&mut self, state: &SimState, model: &Model, cost: &CostSpec) -> IterationReport {
        let grid = self.step_grid(model, state.time);
        let result = self.plan.resample_as(grid, Interpolation::Zero).and_then(|mut nominal| {
            nominal.clamp_params(&model.spec().control_lower, &model.spec().control_upper);
            let r = plan_iteration(&nominal, state, model, cost, &self.settings, &mut self.reg);
            self.plan = nominal;
            r
        });
        match result {
            Ok(it) => {
                let (best_cost, worst_cost) = best_worst(&it.scores, it.best);
                self.plan = it.plan;
                self.feedback = Some(Feedback {
                    timestep: model.timestep(),
                    states: it.policy.states,
                    gains: it.policy.gains,
                });
                IterationReport {
                    nominal_cost: it.scores[0],
                    best_cost,
                    worst_cost,
                    candidates: it.scores.len(),
                    expected_improvement: Some(it.expected_improvement),
                    regularization: Some(it.regularization),
                    aborted: None,
                }
            }
            Err(e) => {
                // A fresh state next iteration deserves a fresh start.
                self.reg = Regularization::default();
                self.feedback = None;
                IterationReport {
                    nominal_cost: f64::INFINITY,
                    best_cost: f64::INFINITY,
                    worst_cost: f64::INFINITY,
                    aborted: Some(e.to_string()),
                    ..Default::default()
                }
            }
        }
    }

    fn policy(&self) -> Policy {
        Policy {
            plan: self.plan.clone(),
            feedback: self.feedback.clone(),
        }
    }

    fn warm_start(&mut self, plan: &SplinePlan) {
        self.plan = plan.clone();
        self.feedback = None;
    }

    fn reset(&mut self, model: &Model, time: f64) {
        self.plan = neutral_plan(model.spec(), time, Interpolation::Zero);
        self.feedback = None;
        self.reg = Regularization::default();
    }

    fn settings(&self) -> &PlannerSettings {
        &self.settings
    }

    fn set_setting(&mut self, name: &str, value: f64) -> Result<()> {
        self.settings.set(name, value)
    }
}
