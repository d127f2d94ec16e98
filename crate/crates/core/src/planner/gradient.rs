//! First-order planner: co-state (adjoint) sweep for `∂J/∂u`, chain rule
//! through the spline basis to `∂J/∂θ`, then a parallel line search over
//! log-spaced step sizes.

use nalgebra::DVector;
use rayon::prelude::*;

use super::sampling::evaluate_candidate;
use super::{best_worst, neutral_plan, spline_grid, IterationReport, Planner, PlannerKind, PlannerSettings, Policy};
use crate::dynamics::{Model, SimState};
use crate::error::{check_len, Error, Result};
use crate::objective::CostSpec;
use crate::rollout::{argmin, linearize, score, StepLinearization};
use crate::spline::SplinePlan;

/// Co-states `λ_{0..=T+1}` (with `λ_{T+1} = 0`) and `∂J/∂u_{0..=T}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostateSweep {
    pub lambda: Vec<DVector<f64>>,
    pub dj_du: Vec<DVector<f64>>,
}

/// Backward recursion
/// `λ_t = ∂c/∂x_t + A_tᵀ λ_{t+1}`, `∂J/∂u_t = ∂c/∂u_t + B_tᵀ λ_{t+1}`.
pub fn costate_sweep(steps: &[StepLinearization]) -> Result<CostateSweep> {
    let n = steps.len();
    let Some(first) = steps.first() else {
        return Ok(CostateSweep {
            lambda: vec![],
            dj_du: vec![],
        });
    };
    let nx = first.a.nrows();
    let mut lambda = vec![DVector::zeros(nx); n + 1];
    let mut dj_du = vec![DVector::zeros(first.b.ncols()); n];
    for t in (0..n).rev() {
        let step = &steps[t];
        let next = &lambda[t + 1];
        dj_du[t] = &step.cost.cu + step.b.transpose() * next;
        lambda[t] = &step.cost.cx + step.a.transpose() * next;
        if lambda[t].iter().chain(dj_du[t].iter()).any(|v| !v.is_finite()) {
            return Err(Error::Diverged("co-state sweep"));
        }
    }
    Ok(CostateSweep { lambda, dj_du })
}

/// `∂J/∂θ = Σ_t ∂J/∂u_t · ∂s(τ_t)/∂θ`, laid out like the plan's values.
pub fn chain_to_params(dj_du: &[DVector<f64>], plan: &SplinePlan, times: &[f64]) -> Result<Vec<f64>> {
    check_len("step times", dj_du.len(), times.len())?;
    let dim = plan.dim();
    let mut grad = vec![0.0; plan.values().len()];
    for (g, t) in dj_du.iter().zip(times) {
        check_len("control gradient", dim, g.len())?;
        for (k, w) in plan.derivative_wrt_params(*t).iter() {
            for i in 0..dim {
                grad[k * dim + i] += w * g[i];
            }
        }
    }
    Ok(grad)
}

/// `n` step sizes log-spaced over `[alpha_min, alpha_max]`.
pub fn alpha_grid(alpha_min: f64, alpha_max: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![alpha_max];
    }
    let ratio = (alpha_max / alpha_min).ln();
    (0..n)
        .map(|i| alpha_min * (ratio * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradientImprovement {
    pub plan: SplinePlan,
    pub best: usize,
    /// Candidate scores; index 0 is the nominal.
    pub scores: Vec<f64>,
    pub gradient: Vec<f64>,
}

/// Gradient of `J` with respect to the knot values of `plan`.
pub fn plan_gradient(
    plan: &SplinePlan,
    x0: &SimState,
    model: &Model,
    cost: &CostSpec,
    settings: &PlannerSettings,
) -> Result<(f64, Vec<f64>)> {
    let rollout = evaluate_candidate(plan, x0, model, cost, settings.horizon)?;
    let steps = linearize(model, cost, &rollout, settings.fd_eps)?;
    let sweep = costate_sweep(&steps)?;
    let grad = chain_to_params(&sweep.dj_du, plan, &rollout.times)?;
    Ok((rollout.total, grad))
}

/// One sweep plus one line search. The nominal is candidate 0 and wins ties.
pub fn improve(
    nominal: &SplinePlan,
    x0: &SimState,
    model: &Model,
    cost: &CostSpec,
    settings: &PlannerSettings,
) -> Result<GradientImprovement> {
    let (nominal_cost, gradient) = plan_gradient(nominal, x0, model, cost, settings)?;
    if gradient.iter().all(|g| *g == 0.0) {
        return Ok(GradientImprovement {
            plan: nominal.clone(),
            best: 0,
            scores: vec![nominal_cost],
            gradient,
        });
    }
    let spec = model.spec();
    let g = &settings.gradient;
    let mut candidates = vec![nominal.clone()];
    for alpha in alpha_grid(g.alpha_min, g.alpha_max, g.num_alphas) {
        let mut c = nominal.clone();
        for (v, d) in c.values_mut().iter_mut().zip(&gradient) {
            *v -= alpha * d;
        }
        c.clamp_params(&spec.control_lower, &spec.control_upper);
        candidates.push(c);
    }
    let mut scores: Vec<f64> = candidates[1..]
        .par_iter()
        .map(|c| score(&evaluate_candidate(c, x0, model, cost, settings.horizon)))
        .collect();
    scores.insert(0, nominal_cost);
    let best = argmin(&scores);
    Ok(GradientImprovement {
        plan: candidates.swap_remove(best),
        best,
        scores,
        gradient,
    })
}

#[derive(Debug)]
pub struct GradientPlanner {
    settings: PlannerSettings,
    plan: SplinePlan,
}

impl GradientPlanner {
    pub fn new(settings: PlannerSettings, model: &Model) -> Self {
        let plan = neutral_plan(model.spec(), 0.0, settings.interpolation);
        Self { settings, plan }
    }

    pub fn plan(&self) -> &SplinePlan {
        &self.plan
    }
}

impl Planner for GradientPlanner {
    fn kind(&self) -> PlannerKind {
        PlannerKind::Gradient
    }

    fn iterate(&mut self, state: &SimState, model: &Model, cost: &CostSpec) -> IterationReport {
        let grid = spline_grid(&self.settings, model, state.time);
        let nominal = self.plan.resample_as(grid, self.settings.interpolation).map(|mut p| {
            p.clamp_params(&model.spec().control_lower, &model.spec().control_upper);
            p
        });
        let result = nominal.and_then(|n| {
            let r = improve(&n, state, model, cost, &self.settings);
            self.plan = n;
            r
        });
        match result {
            Ok(result) => {
                let (best_cost, worst_cost) = best_worst(&result.scores, result.best);
                self.plan = result.plan;
                IterationReport {
                    nominal_cost: result.scores[0],
                    best_cost,
                    worst_cost,
                    candidates: result.scores.len(),
                    ..Default::default()
                }
            }
            Err(e) => IterationReport {
                nominal_cost: f64::INFINITY,
                best_cost: f64::INFINITY,
                worst_cost: f64::INFINITY,
                aborted: Some(e.to_string()),
                ..Default::default()
            },
        }
    }

    fn policy(&self) -> Policy {
        Policy::open_loop(self.plan.clone())
    }

    fn warm_start(&mut self, plan: &SplinePlan) {
        self.plan = plan.clone();
    }

    fn reset(&mut self, model: &Model, time: f64) {
        self.plan = neutral_plan(model.spec(), time, self.settings.interpolation);
    }

    fn settings(&self) -> &PlannerSettings {
        &self.settings
    }

    fn set_setting(&mut self, name: &str, value: f64) -> Result<()> {
        self.settings.set(name, value)
    }
}
