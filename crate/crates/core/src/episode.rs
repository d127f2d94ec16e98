//! Synchronous episodes: the planner runs a fixed number of iterations
//! between simulation steps, so a run is a pure function of task, planner
//! and seed.

use std::time::Instant;

use crate::dynamics::{Model, SimState};
use crate::error::{Error, Result};
use crate::objective::CostSpec;
use crate::planner::{make_planner, IterationReport, Planner, PlannerKind};
use crate::task::TaskSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOptions {
    pub planner: PlannerKind,
    pub seed: u64,
    /// Planner iterations between consecutive simulation steps.
    pub iterations_per_step: usize,
}

impl EpisodeOptions {
    pub fn new(planner: PlannerKind, seed: u64) -> Self {
        Self {
            planner,
            seed,
            iterations_per_step: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub time: f64,
    pub state: SimState,
    pub action: Vec<f64>,
    /// Weighted value of every cost term at `(state, action)`.
    pub term_costs: Vec<f64>,
    pub total_cost: f64,
    pub goal_error: f64,
    /// Wall time spent planning before this step, milliseconds.
    pub planning_ms: f64,
    pub report: IterationReport,
}

/// Tracks "error below threshold for `hold` consecutive seconds".
#[derive(Clone, Debug)]
pub struct SuccessTracker {
    threshold: f64,
    hold_steps: usize,
    run: usize,
    achieved_at: Option<f64>,
}

impl SuccessTracker {
    pub fn new(threshold: f64, hold: f64, timestep: f64) -> Self {
        Self {
            threshold,
            hold_steps: ((hold / timestep) - 1e-9).ceil().max(0.0) as usize,
            run: 0,
            achieved_at: None,
        }
    }

    /// Feeds the goal error observed at `time`.
    pub fn observe(&mut self, time: f64, error: f64) {
        if error < self.threshold {
            self.run += 1;
            if self.achieved_at.is_none() && self.run > self.hold_steps {
                self.achieved_at = Some(time);
            }
        } else {
            self.run = 0;
        }
    }

    pub fn achieved_at(&self) -> Option<f64> {
        self.achieved_at
    }

    pub fn success(&self) -> bool {
        self.achieved_at.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub steps: usize,
    /// Mean per-step cost over the second half of the episode.
    pub mean_final_cost: f64,
    pub success: bool,
    /// Time at which the hold requirement was first met.
    pub solved_at: Option<f64>,
    pub resets: usize,
    pub median_planning_ms: f64,
}

/// Mean of the costs in the final 50% of steps (`NaN` if there are none).
pub fn mean_final_half(costs: &[f64]) -> f64 {
    let tail = &costs[costs.len() / 2..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub struct SyncEpisode {
    task: TaskSpec,
    model: Model,
    cost: CostSpec,
    planner: Box<dyn Planner>,
    state: SimState,
    options: EpisodeOptions,
    tracker: SuccessTracker,
    resets: usize,
}

impl SyncEpisode {
    pub fn new(task: &TaskSpec, options: EpisodeOptions) -> Result<Self> {
        if options.iterations_per_step == 0 {
            return Err(Error::InvalidConfig("iterations_per_step must be positive".into()));
        }
        let model = task.build_model()?;
        let planner = make_planner(options.planner, task.seeded_settings(options.seed), &model)?;
        let state = task.seeded_initial_state(options.seed);
        let tracker = SuccessTracker::new(task.success.threshold, task.success.hold, model.timestep());
        Ok(Self {
            task: task.clone(),
            cost: task.cost.clone(),
            model,
            planner,
            state,
            options,
            tracker,
            resets: 0,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn planner(&self) -> &dyn Planner {
        self.planner.as_ref()
    }

    pub fn tracker(&self) -> &SuccessTracker {
        &self.tracker
    }

    pub fn resets(&self) -> usize {
        self.resets
    }

    /// Plans, then advances the simulation by one timestep.
    pub fn step(&mut self) -> StepRecord {
        let start = Instant::now();
        let mut report = IterationReport::default();
        for _ in 0..self.options.iterations_per_step {
            report = self.planner.iterate(&self.state, &self.model, &self.cost);
        }
        let planning_ms = start.elapsed().as_secs_f64() * 1e3;
        let action = self.planner.policy().action(&self.state, self.model.spec());
        let residual = self
            .model
            .residual(&self.state, &action)
            .unwrap_or_else(|_| vec![f64::NAN; self.model.spec().nr]);
        let record = StepRecord {
            time: self.state.time,
            state: self.state.clone(),
            term_costs: self.cost.term_values(&residual),
            total_cost: self.cost.cost(&residual),
            goal_error: self.task.goal_error(&self.model, &self.state),
            action,
            planning_ms,
            report,
        };
        self.tracker.observe(record.time, record.goal_error);
        match self.model.step(&self.state, &record.action) {
            Ok((next, _)) if next.is_finite() => self.state = next,
            _ => self.reset(),
        }
        if let Some(goal) = self.task.check_transition(&self.model, &self.state) {
            self.model.set_goal(&goal).expect("task goals are validated");
        }
        record
    }

    /// Adds a velocity impulse to the current state.
    pub fn perturb(&mut self, impulse: &[f64]) -> Result<()> {
        self.state = self.model.apply_impulse(&self.state, impulse)?;
        Ok(())
    }

    fn reset(&mut self) {
        let time = self.state.time + self.model.timestep();
        self.state = self.task.seeded_initial_state(self.options.seed);
        self.state.time = time;
        self.planner.reset(&self.model, time);
        self.resets += 1;
    }

    /// Runs for `duration` simulated seconds, passing each record to `sink`.
    pub fn run<F: FnMut(&StepRecord)>(&mut self, duration: f64, mut sink: F) -> EpisodeSummary {
        let steps = (duration / self.model.timestep()).round().max(0.0) as usize;
        let mut costs = Vec::with_capacity(steps);
        let mut planning = Vec::with_capacity(steps);
        for _ in 0..steps {
            let record = self.step();
            costs.push(record.total_cost);
            planning.push(record.planning_ms);
            sink(&record);
        }
        EpisodeSummary {
            steps,
            mean_final_cost: mean_final_half(&costs),
            success: self.tracker.success(),
            solved_at: self.tracker.achieved_at(),
            resets: self.resets,
            median_planning_ms: median(&planning),
        }
    }
}
