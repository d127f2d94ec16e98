//! Shooting planners sharing a warm-started plan representation.
//!
//! All planners store their nominal plan as a [`SplinePlan`]. The sampling
//! and gradient planners use `P + 1` knots spread uniformly over the
//! horizon; iLQG uses one zero-order knot per timestep, i.e. the direct
//! control sequence `u_{0:T}`. Switching planners resamples the previous
//! plan onto the new representation.

pub mod gradient;
pub mod ilqg;
pub mod sampling;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::dynamics::{Model, ModelSpec, SimState};
use crate::error::{Error, Result};
use crate::objective::CostSpec;
use crate::rollout::dvec;
use crate::spline::{uniform_times, Interpolation, SplinePlan};

pub use gradient::GradientPlanner;
pub use ilqg::IlqgPlanner;
pub use sampling::SamplingPlanner;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerKind {
    Sampling,
    Gradient,
    Ilqg,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 3] = [PlannerKind::Sampling, PlannerKind::Gradient, PlannerKind::Ilqg];

    pub fn as_str(self) -> &'static str {
        match self {
            PlannerKind::Sampling => "sampling",
            PlannerKind::Gradient => "gradient",
            PlannerKind::Ilqg => "ilqg",
        }
    }
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampling" | "predictive-sampling" => Ok(Self::Sampling),
            "gradient" | "gradient-descent" => Ok(Self::Gradient),
            "ilqg" | "ilqr" => Ok(Self::Ilqg),
            other => Err(Error::InvalidConfig(format!("unknown planner `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSettings {
    /// Candidates per iteration, nominal included (`N`).
    pub samples: usize,
    /// Noise standard deviation as a fraction of each channel's range.
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientSettings {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub num_alphas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlqgSettings {
    /// Smallest line-search step; the grid is `1, ½, ¼, …` down to this.
    pub alpha_min: f64,
    pub max_alphas: usize,
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu_increase: f64,
    pub mu_decrease: f64,
}

/// Everything the three planners can be tuned with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSettings {
    /// Horizon in timesteps (`T`).
    pub horizon: usize,
    /// Spline intervals (`P`); the plan has `P + 1` knots.
    pub spline_intervals: usize,
    pub interpolation: Interpolation,
    pub fd_eps: f64,
    pub sampling: SamplingSettings,
    pub gradient: GradientSettings,
    pub ilqg: IlqgSettings,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            horizon: 100,
            spline_intervals: 3,
            interpolation: Interpolation::Cubic,
            fd_eps: 1e-6,
            sampling: SamplingSettings {
                samples: 10,
                sigma: 0.25,
                seed: 0,
            },
            gradient: GradientSettings {
                alpha_min: 1e-4,
                alpha_max: 1.0,
                num_alphas: 10,
            },
            ilqg: IlqgSettings {
                alpha_min: 1.0 / 1024.0,
                max_alphas: 11,
                mu_min: 1e-6,
                mu_max: 1e6,
                mu_increase: 10.0,
                mu_decrease: 2.0,
            },
        }
    }
}

impl Default for SamplingSettings {
    fn default() -> Self {
        PlannerSettings::default().sampling
    }
}

impl Default for GradientSettings {
    fn default() -> Self {
        PlannerSettings::default().gradient
    }
}

impl Default for IlqgSettings {
    fn default() -> Self {
        PlannerSettings::default().ilqg
    }
}

impl PlannerSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be at least one step");
        }
        if !(self.fd_eps > 0.0) {
            return bad("fd_eps must be positive");
        }
        if self.sampling.samples == 0 {
            return bad("sampling needs at least one candidate");
        }
        if !(self.sampling.sigma >= 0.0 && self.sampling.sigma.is_finite()) {
            return bad("sigma must be non-negative");
        }
        let g = &self.gradient;
        if !(g.alpha_min > 0.0 && g.alpha_min <= g.alpha_max && g.alpha_max.is_finite()) {
            return bad("gradient step bounds must satisfy 0 < alpha_min <= alpha_max");
        }
        if g.num_alphas == 0 {
            return bad("gradient line search needs at least one step size");
        }
        let i = &self.ilqg;
        if !(i.alpha_min > 0.0 && i.alpha_min <= 1.0) {
            return bad("ilqg alpha_min must lie in (0, 1]");
        }
        if i.max_alphas == 0 {
            return bad("ilqg line search needs at least one step size");
        }
        if !(i.mu_min > 0.0 && i.mu_min <= i.mu_max && i.mu_increase > 1.0 && i.mu_decrease > 1.0) {
            return bad("ilqg regularization parameters are inconsistent");
        }
        Ok(())
    }

    /// Names accepted by [`PlannerSettings::set`].
    pub const TUNABLE: &'static [&'static str] = &[
        "horizon",
        "spline_intervals",
        "interpolation",
        "samples",
        "sigma",
        "alpha_min",
        "alpha_max",
        "num_alphas",
        "ilqg_alpha_min",
        "mu_min",
        "mu_max",
    ];

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "horizon" => self.horizon as f64,
            "spline_intervals" => self.spline_intervals as f64,
            "interpolation" => match self.interpolation {
                Interpolation::Zero => 0.0,
                Interpolation::Linear => 1.0,
                Interpolation::Cubic => 2.0,
            },
            "samples" => self.sampling.samples as f64,
            "sigma" => self.sampling.sigma,
            "alpha_min" => self.gradient.alpha_min,
            "alpha_max" => self.gradient.alpha_max,
            "num_alphas" => self.gradient.num_alphas as f64,
            "ilqg_alpha_min" => self.ilqg.alpha_min,
            "mu_min" => self.ilqg.mu_min,
            "mu_max" => self.ilqg.mu_max,
            _ => return None,
        })
    }

    /// Applies one live edit; the settings are left untouched on error.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidConfig(format!("{name} must be finite")));
        }
        let count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v <= 1e6 {
                Ok(v as usize)
            } else {
                Err(Error::InvalidConfig(format!("{name} must be a non-negative integer")))
            }
        };
        let mut next = self.clone();
        match name {
            "horizon" => next.horizon = count(value)?,
            "spline_intervals" => next.spline_intervals = count(value)?,
            "interpolation" => {
                next.interpolation = match count(value)? {
                    0 => Interpolation::Zero,
                    1 => Interpolation::Linear,
                    2 => Interpolation::Cubic,
                    _ => return Err(Error::InvalidConfig("interpolation must be 0, 1 or 2".into())),
                }
            }
            "samples" => next.sampling.samples = count(value)?,
            "sigma" => next.sampling.sigma = value,
            "alpha_min" => next.gradient.alpha_min = value,
            "alpha_max" => next.gradient.alpha_max = value,
            "num_alphas" => next.gradient.num_alphas = count(value)?,
            "ilqg_alpha_min" => next.ilqg.alpha_min = value,
            "mu_min" => next.ilqg.mu_min = value,
            "mu_max" => next.ilqg.mu_max = value,
            other => return Err(Error::InvalidConfig(format!("unknown planner setting `{other}`"))),
        }
        next.validate()?;
        *self = next;
        Ok(())
    }
}

/// Time-varying linear feedback around a nominal trajectory, one entry per
/// knot of a direct-sequence plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Feedback {
    pub timestep: f64,
    pub states: Vec<Vec<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

/// What the agent reads to produce actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub plan: SplinePlan,
    pub feedback: Option<Feedback>,
}

impl Policy {
    pub fn open_loop(plan: SplinePlan) -> Self {
        Self { plan, feedback: None }
    }

    /// Action at the state's time, clamped to the control box.
    pub fn action(&self, state: &SimState, spec: &ModelSpec) -> Vec<f64> {
        let mut u = match &self.feedback {
            None => self.plan.evaluate(state.time),
            Some(fb) => {
                // Direct sequences are indexed by the nearest step so that
                // accumulated-time rounding never selects the wrong knot.
                let last = self.plan.num_knots() - 1;
                let steps = ((state.time - self.plan.start_time()) / fb.timestep).round();
                let k = if steps <= 0.0 { 0 } else { (steps as usize).min(last) };
                let mut u = self.plan.knot(k).to_vec();
                let x = state.to_flat();
                if let (Some(xbar), Some(gain)) = (fb.states.get(k), fb.gains.get(k)) {
                    if xbar.len() == x.len() {
                        let du = gain * (dvec(&x) - dvec(xbar));
                        for (ui, d) in u.iter_mut().zip(du.iter()) {
                            *ui += d;
                        }
                    }
                }
                u
            }
        };
        if u.iter().any(|v| !v.is_finite()) {
            u = spec.neutral_control();
        }
        spec.clamp_control(&mut u);
        u
    }
}

/// Summary of one planner iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// Objective of the warm-started nominal before improvement.
    pub nominal_cost: f64,
    /// Objective of the plan kept after this iteration.
    pub best_cost: f64,
    /// Largest finite candidate objective (equal to `best_cost` if none).
    pub worst_cost: f64,
    pub candidates: usize,
    pub expected_improvement: Option<f64>,
    pub regularization: Option<f64>,
    /// Set when the iteration was abandoned and the nominal retained.
    pub aborted: Option<String>,
}

pub(crate) fn best_worst(scores: &[f64], best: usize) -> (f64, f64) {
    let worst = scores
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let best_cost = scores[best];
    (best_cost, if worst.is_finite() { worst } else { best_cost })
}

pub trait Planner: Send + fmt::Debug {
    fn kind(&self) -> PlannerKind;

    /// One warm-started improvement from `state`: resample the nominal to
    /// the horizon starting at `state.time`, improve it once, keep the best.
    fn iterate(&mut self, state: &SimState, model: &Model, cost: &CostSpec) -> IterationReport;

    fn policy(&self) -> Policy;

    /// Adopts another plan as the nominal; it is converted to this planner's
    /// representation on the next iteration.
    fn warm_start(&mut self, plan: &SplinePlan);

    /// Drops the nominal back to the neutral control.
    fn reset(&mut self, model: &Model, time: f64);

    fn settings(&self) -> &PlannerSettings;

    fn set_setting(&mut self, name: &str, value: f64) -> Result<()>;
}

/// Constant plan at the neutral control.
pub fn neutral_plan(spec: &ModelSpec, time: f64, kind: Interpolation) -> SplinePlan {
    SplinePlan::constant(vec![time], &spec.neutral_control(), kind).expect("single knot is valid")
}

/// Knot grid for a spline planner starting at `time`.
pub(crate) fn spline_grid(settings: &PlannerSettings, model: &Model, time: f64) -> Vec<f64> {
    let duration = settings.horizon as f64 * model.timestep();
    uniform_times(time, duration, settings.spline_intervals)
}

pub fn make_planner(kind: PlannerKind, settings: PlannerSettings, model: &Model) -> Result<Box<dyn Planner>> {
    settings.validate()?;
    Ok(match kind {
        PlannerKind::Sampling => Box::new(SamplingPlanner::new(settings, model)),
        PlannerKind::Gradient => Box::new(GradientPlanner::new(settings, model)),
        PlannerKind::Ilqg => Box::new(IlqgPlanner::new(settings, model)),
    })
}
