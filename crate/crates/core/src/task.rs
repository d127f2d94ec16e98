//! Built-in tasks: a model, a residual cost, planner defaults and a goal
//! rule, loaded from the TOML files under `tasks/`.
//!
//! Config schema (all tables required unless noted):
//!
//! ```toml
//! name = "pendulum-swingup"
//! description = "..."            # optional
//! planner = "sampling"           # default planner kind
//!
//! [model]                        # see `ModelConfig`
//! [initial]                      # qpos, qvel, optional jitter (std of qpos noise per seed)
//! [cost]                         # risk plus [[cost.terms]] with name, weight, norm, offset, dim
//! [settings]                     # `PlannerSettings`, missing keys take defaults
//! [transition]                   # optional; kind = "static" | "waypoints" (points, radius)
//! [success]                      # threshold on the goal error, hold time in seconds
//! ```

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Model, ModelConfig, SimState};
use crate::error::{check_len, Error, Result};
use crate::objective::CostSpec;
use crate::planner::{PlannerKind, PlannerSettings};

const BUILTIN: [&str; 4] = [
    include_str!("../tasks/pendulum-swingup.toml"),
    include_str!("../tasks/cartpole-swingup.toml"),
    include_str!("../tasks/acrobot-swingup.toml"),
    include_str!("../tasks/particle-waypoints.toml"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub qpos: Vec<f64>,
    pub qvel: Vec<f64>,
    /// Standard deviation of the per-seed Gaussian offset added to `qpos`.
    #[serde(default)]
    pub jitter: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Transition {
    #[default]
    Static,
    /// Advance to the next point (cyclically) once within `radius` of the
    /// current goal.
    Waypoints { points: Vec<Vec<f64>>, radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessCriterion {
    /// Goal error below which the task counts as solved.
    pub threshold: f64,
    /// Seconds the error must stay below `threshold`.
    pub hold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub planner: PlannerKind,
    pub model: ModelConfig,
    pub initial: InitialState,
    pub cost: CostSpec,
    #[serde(default)]
    pub settings: PlannerSettings,
    #[serde(default)]
    pub transition: Transition,
    pub success: SuccessCriterion,
}

impl TaskSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let task: TaskSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        task.validate()?;
        Ok(task)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.build_model()?;
        let spec = model.spec();
        self.cost.validate(spec.nr)?;
        self.settings.validate()?;
        check_len("initial qpos", spec.nq, self.initial.qpos.len())?;
        check_len("initial qvel", spec.nv, self.initial.qvel.len())?;
        if !(self.initial.jitter >= 0.0 && self.initial.jitter.is_finite()) {
            return Err(Error::InvalidConfig("initial jitter must be non-negative".into()));
        }
        if !(self.success.threshold > 0.0 && self.success.hold >= 0.0) {
            return Err(Error::InvalidConfig("success needs a positive threshold".into()));
        }
        if let Transition::Waypoints { points, radius } = &self.transition {
            if points.is_empty() || !(*radius > 0.0) {
                return Err(Error::InvalidConfig("waypoints need points and a positive radius".into()));
            }
            let mut probe = model.clone();
            for p in points {
                probe.set_goal(p)?;
            }
        }
        Ok(())
    }

    /// The model with the task's first goal installed.
    pub fn build_model(&self) -> Result<Model> {
        let mut model = Model::try_from(self.model.clone())?;
        if let Transition::Waypoints { points, .. } = &self.transition {
            if let Some(first) = points.first() {
                model.set_goal(first)?;
            }
        }
        Ok(model)
    }

    /// Nominal initial state.
    pub fn initial_state(&self) -> SimState {
        SimState::new(self.initial.qpos.clone(), self.initial.qvel.clone(), 0.0)
    }

    /// Initial state with the seed's position jitter applied.
    pub fn seeded_initial_state(&self, seed: u64) -> SimState {
        let mut state = self.initial_state();
        if self.initial.jitter > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::MAX);
            for q in &mut state.qpos {
                let z: f64 = rng.sample(StandardNormal);
                *q += self.initial.jitter * z;
            }
        }
        state
    }

    /// Planner settings with the sampling seed replaced.
    pub fn seeded_settings(&self, seed: u64) -> PlannerSettings {
        let mut s = self.settings.clone();
        s.sampling.seed = seed;
        s
    }

    /// Next goal if `state` has reached the model's current one.
    pub fn check_transition(&self, model: &Model, state: &SimState) -> Option<Vec<f64>> {
        let Transition::Waypoints { points, radius } = &self.transition else {
            return None;
        };
        if model.goal_error(state) >= *radius {
            return None;
        }
        let next = points
            .iter()
            .position(|p| p.as_slice() == model.goal())
            .map_or(0, |i| (i + 1) % points.len());
        Some(points[next].clone())
    }

    /// Goal error the success criterion is judged against.
    pub fn goal_error(&self, model: &Model, state: &SimState) -> f64 {
        model.goal_error(state)
    }

    /// Term names in cost order.
    pub fn term_names(&self) -> Vec<String> {
        self.cost.terms.iter().map(|t| t.name.clone()).collect()
    }
}

/// All built-in tasks in a fixed order.
pub fn registry() -> Vec<TaskSpec> {
    BUILTIN
        .iter()
        .map(|text| TaskSpec::from_toml(text).expect("built-in task configs are valid"))
        .collect()
}

pub fn find_task(name: &str) -> Result<TaskSpec> {
    registry()
        .into_iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::UnknownTask(name.to_string()))
}
