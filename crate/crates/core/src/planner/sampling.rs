//! Predictive Sampling: random search around the nominal spline.
//!
//! Each iteration evaluates the nominal plus `N − 1` Gaussian perturbations
//! of its knot values and keeps the cheapest. Noise for candidate `i` of
//! iteration `k` comes from its own counter-addressed ChaCha substream, so
//! the candidate set does not depend on evaluation order or thread count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{best_worst, neutral_plan, spline_grid, IterationReport, Planner, PlannerKind, PlannerSettings, Policy};
use crate::dynamics::{Model, SimState};
use crate::error::Result;
use crate::objective::CostSpec;
use crate::rollout::{argmin, score, simulate, Rollout};
use crate::spline::SplinePlan;

/// RNG for candidate `index` of planner iteration `iteration`.
pub fn candidate_rng(seed: u64, iteration: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng.set_word_pos((index as u128) << 40);
    rng
}

/// Candidate 0 is the nominal; the rest add `σ · range` scaled Gaussian
/// noise to every knot value and are clamped to the control box.
pub fn sample_candidates(
    nominal: &SplinePlan,
    model: &Model,
    samples: usize,
    sigma: f64,
    seed: u64,
    iteration: u64,
) -> Vec<SplinePlan> {
    let spec = model.spec();
    let range = spec.control_range();
    let dim = nominal.dim();
    (0..samples.max(1))
        .map(|i| {
            let mut candidate = nominal.clone();
            if i > 0 && sigma > 0.0 {
                let mut rng = candidate_rng(seed, iteration, i);
                for (k, v) in candidate.values_mut().iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sigma * range[k % dim] * z;
                }
                candidate.clamp_params(&spec.control_lower, &spec.control_upper);
            }
            candidate
        })
        .collect()
}

/// Open-loop rollout of a spline candidate from `x0` over `horizon` steps.
pub fn evaluate_candidate(
    candidate: &SplinePlan,
    x0: &SimState,
    model: &Model,
    cost: &CostSpec,
    horizon: usize,
) -> Result<Rollout> {
    simulate(model, cost, x0, horizon, |_, time, _, u| candidate.evaluate_into(time, u))
}

/// Result of one random-search improvement.
#[derive(Clone, Debug)]
pub struct Improvement {
    pub plan: SplinePlan,
    pub best: usize,
    pub scores: Vec<f64>,
}

/// Evaluates every candidate (in parallel) and returns the argmin, nominal
/// winning ties. Failed rollouts score `+∞`.
pub fn improve(
    nominal: &SplinePlan,
    x0: &SimState,
    model: &Model,
    cost: &CostSpec,
    settings: &PlannerSettings,
    iteration: u64,
) -> Improvement {
    let s = &settings.sampling;
    let candidates = sample_candidates(nominal, model, s.samples, s.sigma, s.seed, iteration);
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|c| score(&evaluate_candidate(c, x0, model, cost, settings.horizon)))
        .collect();
    let best = argmin(&scores);
    Improvement {
        plan: candidates[best].clone(),
        best,
        scores,
    }
}

#[derive(Debug)]
pub struct SamplingPlanner {
    settings: PlannerSettings,
    plan: SplinePlan,
    iteration: u64,
}

impl SamplingPlanner {
    pub fn new(settings: PlannerSettings, model: &Model) -> Self {
        let plan = neutral_plan(model.spec(), 0.0, settings.interpolation);
        Self {
            settings,
            plan,
            iteration: 0,
        }
    }

    pub fn plan(&self) -> &SplinePlan {
        &self.plan
    }
}

impl Planner for SamplingPlanner {
    fn kind(&self) -> PlannerKind {
        PlannerKind::Sampling
    }

    fn iterate(&mut self, state: &SimState, model: &Model, cost: &CostSpec) -> IterationReport {
        let grid = spline_grid(&self.settings, model, state.time);
        let mut nominal = match self.plan.resample_as(grid, self.settings.interpolation) {
            Ok(p) => p,
            Err(e) => {
                return IterationReport {
                    aborted: Some(e.to_string()),
                    ..Default::default()
                }
            }
        };
        nominal.clamp_params(&model.spec().control_lower, &model.spec().control_upper);
        let result = improve(&nominal, state, model, cost, &self.settings, self.iteration);
        self.iteration += 1;
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
