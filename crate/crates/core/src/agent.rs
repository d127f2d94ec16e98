//! Asynchronous receding-horizon control: an agent thread stepping the
//! simulation in (scaled) real time and a planner thread improving the plan
//! it reads from.
//!
//! The two threads share exactly two snapshots, each with a single writer:
//!
//! * [`SharedPlan`]: the last published policy, written by the planner;
//! * the agent snapshot: state, clock, last action, written by the agent.
//!
//! Neither thread ever waits on the other. Commands are validated and
//! applied one at a time by [`Runtime`]; they either replace the task
//! context (cost, model parameters) or are forwarded to the owning thread.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Model, ModelSpec, SimState};
use crate::error::{Error, Result};
use crate::objective::CostSpec;
use crate::planner::{make_planner, IterationReport, Planner, PlannerKind, PlannerSettings, Policy};
use crate::task::TaskSpec;

/// One published plan. Generation 0 is the empty placeholder present
/// before the planner's first publication.
#[derive(Clone, Debug)]
pub struct PublishedPlan {
    pub generation: u64,
    pub policy: Option<Policy>,
    pub planner: PlannerKind,
    /// Agent episode the plan was computed for.
    pub episode: u64,
    pub report: IterationReport,
    pub planning_ms: f64,
    pub published_at: Instant,
    /// Digest of generation and plan contents, fixed at publication.
    pub checksum: u64,
}

impl PublishedPlan {
    pub fn digest(generation: u64, policy: Option<&Policy>) -> u64 {
        // FNV-1a over the generation and every knot bit pattern.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        mix(generation);
        if let Some(p) = policy {
            for t in p.plan.times() {
                mix(t.to_bits());
            }
            for v in p.plan.values() {
                mix(v.to_bits());
            }
        }
        h
    }

    pub fn is_consistent(&self) -> bool {
        self.checksum == Self::digest(self.generation, self.policy.as_ref())
    }
}

/// Atomically swapped plan with a strictly increasing generation.
#[derive(Debug)]
pub struct SharedPlan {
    inner: ArcSwap<PublishedPlan>,
}

impl SharedPlan {
    pub fn new(planner: PlannerKind) -> Self {
        Self {
            inner: ArcSwap::from_pointee(PublishedPlan {
                generation: 0,
                policy: None,
                planner,
                episode: 0,
                report: IterationReport::default(),
                planning_ms: 0.0,
                published_at: Instant::now(),
                checksum: PublishedPlan::digest(0, None),
            }),
        }
    }

    /// Publishes a new generation. Intended for a single writer.
    pub fn publish(
        &self,
        policy: Policy,
        planner: PlannerKind,
        episode: u64,
        report: IterationReport,
        planning_ms: f64,
    ) -> u64 {
        let generation = self.inner.load().generation + 1;
        let checksum = PublishedPlan::digest(generation, Some(&policy));
        self.inner.store(Arc::new(PublishedPlan {
            generation,
            policy: Some(policy),
            planner,
            episode,
            report,
            planning_ms,
            published_at: Instant::now(),
            checksum,
        }));
        generation
    }

    pub fn snapshot(&self) -> Arc<PublishedPlan> {
        self.inner.load_full()
    }
}

/// Action the agent applies at `state`: the published policy evaluated at
/// the state's time and clamped. Before the first publication this is the
/// midpoint of the control box; a plan from an earlier episode is ignored
/// in favour of the neutral control.
pub fn action_from_policy(plan: &PublishedPlan, episode: u64, state: &SimState, spec: &ModelSpec) -> Vec<f64> {
    match &plan.policy {
        None => spec.midpoint_control(),
        Some(_) if plan.episode != episode => spec.neutral_control(),
        Some(policy) => policy.action(state, spec),
    }
}

/// Adds a velocity impulse to the state.
pub fn apply_perturbation(model: &Model, state: &SimState, impulse: &[f64]) -> Result<SimState> {
    model.apply_impulse(state, impulse)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClockState {
    pub sim_time: f64,
    /// Wall seconds per simulated second, at least 1.
    pub slowdown: f64,
    pub paused: bool,
}

/// What the agent publishes after every step.
#[derive(Clone, Debug)]
pub struct AgentSnapshot {
    pub task_id: u64,
    pub episode: u64,
    pub steps: u64,
    pub state: SimState,
    pub goal: Vec<f64>,
    pub action: Vec<f64>,
    pub term_costs: Vec<f64>,
    pub total_cost: f64,
    pub goal_error: f64,
    pub clock: ClockState,
}

/// Model and cost the threads currently work with.
#[derive(Clone, Debug)]
pub struct TaskContext {
    /// Bumped whenever the task itself is replaced.
    pub task_id: u64,
    pub task: Arc<TaskSpec>,
    pub model: Model,
    pub cost: CostSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetReason {
    Command,
    Diverged,
    TaskChanged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RuntimeEvent {
    PlanPublished { generation: u64, planner: PlannerKind },
    EpisodeReset { episode: u64, reason: ResetReason, detail: Option<String> },
    PlannerSwitched { from: PlannerKind, to: PlannerKind },
    PerturbationApplied { impulse: Vec<f64> },
    GoalChanged { goal: Vec<f64> },
}

/// Bounded event history with sequence numbers. Consecutive plan
/// publications collapse into the latest one.
#[derive(Debug)]
pub struct EventLog {
    inner: Mutex<(u64, VecDeque<(u64, RuntimeEvent)>)>,
    capacity: usize,
}

impl EventLog {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new((0, VecDeque::new())),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&self, event: RuntimeEvent) {
        let mut guard = self.inner.lock().expect("event log poisoned");
        let (seq, queue) = &mut *guard;
        *seq += 1;
        if matches!(event, RuntimeEvent::PlanPublished { .. })
            && matches!(queue.back(), Some((_, RuntimeEvent::PlanPublished { .. })))
        {
            queue.pop_back();
        }
        queue.push_back((*seq, event));
        while queue.len() > self.capacity {
            queue.pop_front();
        }
    }

    /// Events with sequence number greater than `after`.
    pub fn since(&self, after: u64) -> Vec<(u64, RuntimeEvent)> {
        let guard = self.inner.lock().expect("event log poisoned");
        guard.1.iter().filter(|(s, _)| *s > after).cloned().collect()
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.lock().expect("event log poisoned").0
    }
}

enum AgentMsg {
    Reset,
    Perturb(Vec<f64>),
    SetGoal(Vec<f64>),
    Pause(bool),
    Slowdown(f64),
}

enum PlannerMsg {
    Switch(PlannerKind),
    Setting(String, f64),
}

struct Shared {
    plan: SharedPlan,
    agent: ArcSwap<AgentSnapshot>,
    context: ArcSwap<TaskContext>,
    events: EventLog,
    stop: AtomicBool,
    planner_iterations: AtomicU64,
    step_observers: Mutex<Vec<Sender<Arc<AgentSnapshot>>>>,
}

/// Control surface mirrored by the command path for validation.
struct Control {
    task_id: u64,
    task: Arc<TaskSpec>,
    model: Model,
    cost: CostSpec,
    settings: PlannerSettings,
    planner: PlannerKind,
    agent_tx: Sender<AgentMsg>,
    planner_tx: Sender<PlannerMsg>,
}

#[derive(Clone, Debug)]
pub struct RuntimeOptions {
    pub slowdown: f64,
    pub paused: bool,
    /// Wall-clock lag after which the agent stops trying to catch up.
    pub max_lag: Duration,
    /// Seeds the initial-state jitter and the sampling noise when set.
    pub seed: Option<u64>,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            slowdown: 1.0,
            paused: false,
            max_lag: Duration::from_millis(100),
            seed: None,
        }
    }
}

/// Running agent and planner threads for one task.
pub struct Runtime {
    shared: Arc<Shared>,
    control: Mutex<Control>,
    threads: Vec<JoinHandle<()>>,
}

fn validate_slowdown(f: f64) -> Result<()> {
    if f >= 1.0 && f.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("slowdown must be a finite value >= 1, got {f}")))
    }
}

impl Runtime {
    pub fn start(task: TaskSpec, planner: PlannerKind, options: RuntimeOptions) -> Result<Self> {
        let model = task.build_model()?;
        let settings = match options.seed {
            Some(seed) => task.seeded_settings(seed),
            None => task.settings.clone(),
        };
        let boxed = make_planner(planner, settings, &model)?;
        Self::with_planner(task, boxed, options)
    }

    /// Starts with a caller-supplied planner instance.
    pub fn with_planner(task: TaskSpec, planner: Box<dyn Planner>, options: RuntimeOptions) -> Result<Self> {
        task.validate()?;
        validate_slowdown(options.slowdown)?;
        let model = task.build_model()?;
        let kind = planner.kind();
        let settings = planner.settings().clone();
        let task = Arc::new(task);
        let context = TaskContext {
            task_id: 1,
            task: task.clone(),
            model: model.clone(),
            cost: task.cost.clone(),
        };
        let initial = start_state(&task, options.seed);
        let clock = ClockState {
            sim_time: initial.time,
            slowdown: options.slowdown,
            paused: options.paused,
        };
        let snapshot = snapshot_at(&context, &model, 1, 0, initial, vec![0.0; model.spec().nu], clock);
        let shared = Arc::new(Shared {
            plan: SharedPlan::new(kind),
            agent: ArcSwap::from_pointee(snapshot),
            context: ArcSwap::from_pointee(context),
            events: EventLog::new(1024),
            stop: AtomicBool::new(false),
            planner_iterations: AtomicU64::new(0),
            step_observers: Mutex::new(Vec::new()),
        });
        let (agent_tx, agent_rx) = channel();
        let (planner_tx, planner_rx) = channel();
        let agent = {
            let shared = shared.clone();
            let options = options.clone();
            std::thread::Builder::new()
                .name("agent".into())
                .spawn(move || agent_loop(shared, agent_rx, options))
                .expect("spawn agent thread")
        };
        let planner_thread = {
            let shared = shared.clone();
            std::thread::Builder::new()
                .name("planner".into())
                .spawn(move || planner_loop(shared, planner, planner_rx))
                .expect("spawn planner thread")
        };
        Ok(Self {
            shared,
            control: Mutex::new(Control {
                task_id: 1,
                cost: task.cost.clone(),
                task,
                model,
                settings,
                planner: kind,
                agent_tx,
                planner_tx,
            }),
            threads: vec![agent, planner_thread],
        })
    }

    pub fn plan(&self) -> Arc<PublishedPlan> {
        self.shared.plan.snapshot()
    }

    pub fn agent(&self) -> Arc<AgentSnapshot> {
        self.shared.agent.load_full()
    }

    pub fn context(&self) -> Arc<TaskContext> {
        self.shared.context.load_full()
    }

    pub fn events(&self) -> &EventLog {
        &self.shared.events
    }

    /// Receives every agent snapshot published after a simulation step from
    /// now on. Dropping the receiver unsubscribes.
    pub fn subscribe_steps(&self) -> Receiver<Arc<AgentSnapshot>> {
        let (tx, rx) = channel();
        self.shared.step_observers.lock().expect("observer list poisoned").push(tx);
        rx
    }

    /// Planner iterations completed since start.
    pub fn planner_iterations(&self) -> u64 {
        self.shared.planner_iterations.load(Ordering::Relaxed)
    }

    pub fn planner_kind(&self) -> PlannerKind {
        self.lock().planner
    }

    pub fn planner_settings(&self) -> PlannerSettings {
        self.lock().settings.clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Control> {
        self.control.lock().expect("control surface poisoned")
    }

    fn publish_context(&self, c: &Control) {
        self.shared.context.store(Arc::new(TaskContext {
            task_id: c.task_id,
            task: c.task.clone(),
            model: c.model.clone(),
            cost: c.cost.clone(),
        }));
    }

    pub fn set_weight(&self, term: usize, weight: f64) -> Result<()> {
        let mut c = self.lock();
        let n = c.cost.terms.len();
        let Some(t) = c.cost.terms.get_mut(term) else {
            return Err(Error::InvalidConfig(format!("no cost term {term} (task has {n})")));
        };
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidConfig("weight must be finite and non-negative".into()));
        }
        t.weight = weight;
        self.publish_context(&c);
        Ok(())
    }

    pub fn set_risk(&self, risk: f64) -> Result<()> {
        if !risk.is_finite() {
            return Err(Error::InvalidConfig("risk must be finite".into()));
        }
        let mut c = self.lock();
        c.cost.risk = risk;
        self.publish_context(&c);
        Ok(())
    }

    pub fn set_planner(&self, kind: PlannerKind) -> Result<()> {
        let mut c = self.lock();
        c.planner = kind;
        c.planner_tx.send(PlannerMsg::Switch(kind)).map_err(|_| stopped())
    }

    pub fn set_planner_setting(&self, name: &str, value: f64) -> Result<()> {
        let mut c = self.lock();
        c.settings.set(name, value)?;
        c.planner_tx
            .send(PlannerMsg::Setting(name.to_string(), value))
            .map_err(|_| stopped())
    }

    pub fn set_slowdown(&self, factor: f64) -> Result<()> {
        validate_slowdown(factor)?;
        let c = self.lock();
        c.agent_tx.send(AgentMsg::Slowdown(factor)).map_err(|_| stopped())
    }

    pub fn pause(&self) -> Result<()> {
        let c = self.lock();
        c.agent_tx.send(AgentMsg::Pause(true)).map_err(|_| stopped())
    }

    pub fn resume(&self) -> Result<()> {
        let c = self.lock();
        c.agent_tx.send(AgentMsg::Pause(false)).map_err(|_| stopped())
    }

    pub fn perturb(&self, impulse: Vec<f64>) -> Result<()> {
        let c = self.lock();
        c.model.apply_impulse(&c.model.zero_state(), &impulse)?;
        c.agent_tx.send(AgentMsg::Perturb(impulse)).map_err(|_| stopped())
    }

    pub fn set_goal(&self, goal: Vec<f64>) -> Result<()> {
        let c = self.lock();
        c.model.clone().set_goal(&goal)?;
        c.agent_tx.send(AgentMsg::SetGoal(goal)).map_err(|_| stopped())
    }

    pub fn reset(&self) -> Result<()> {
        let c = self.lock();
        c.agent_tx.send(AgentMsg::Reset).map_err(|_| stopped())
    }

    /// Replaces the running task. The planner kind is kept; its settings
    /// come from the new task.
    pub fn set_task(&self, task: TaskSpec) -> Result<()> {
        task.validate()?;
        let model = task.build_model()?;
        let mut c = self.lock();
        c.task_id += 1;
        c.cost = task.cost.clone();
        c.settings = task.settings.clone();
        c.task = Arc::new(task);
        c.model = model;
        self.publish_context(&c);
        Ok(())
    }

    /// Stops both threads and waits for them.
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn stopped() -> Error {
    Error::InvalidConfig("runtime has stopped".into())
}

fn snapshot_at(
    ctx: &TaskContext,
    model: &Model,
    task_id: u64,
    episode: u64,
    state: SimState,
    action: Vec<f64>,
    clock: ClockState,
) -> AgentSnapshot {
    let residual = model
        .residual(&state, &action)
        .unwrap_or_else(|_| vec![f64::NAN; model.spec().nr]);
    AgentSnapshot {
        task_id,
        episode,
        steps: 0,
        goal: model.goal().to_vec(),
        goal_error: model.goal_error(&state),
        term_costs: ctx.cost.term_values(&residual),
        total_cost: ctx.cost.cost(&residual),
        state,
        action,
        clock,
    }
}

/// Local model copy with the agent-owned goal applied.
fn model_with_goal(ctx: &TaskContext, goal: &[f64]) -> Model {
    let mut model = ctx.model.clone();
    if model.set_goal(goal).is_err() {
        model = ctx.model.clone();
    }
    model
}

fn start_state(task: &TaskSpec, seed: Option<u64>) -> SimState {
    match seed {
        Some(seed) => task.seeded_initial_state(seed),
        None => task.initial_state(),
    }
}

fn agent_loop(shared: Arc<Shared>, rx: Receiver<AgentMsg>, options: RuntimeOptions) {
    let mut ctx = shared.context.load_full();
    let first = shared.agent.load_full();
    let mut task_id = ctx.task_id;
    let mut episode = first.episode;
    let mut state = first.state.clone();
    let mut goal = first.goal.clone();
    let mut model = model_with_goal(&ctx, &goal);
    let mut clock = first.clock;
    let mut steps = 0u64;
    let mut deadline = Instant::now();

    let reset = |state: &mut SimState, episode: &mut u64, ctx: &TaskContext, reason: ResetReason, detail| {
        let time = state.time;
        *state = start_state(&ctx.task, options.seed);
        state.time = time;
        *episode += 1;
        shared.events.push(RuntimeEvent::EpisodeReset {
            episode: *episode,
            reason,
            detail,
        });
    };

    while !shared.stop.load(Ordering::Relaxed) {
        let wait = deadline.saturating_duration_since(Instant::now());
        let wait = if clock.paused { Duration::from_millis(5) } else { wait };
        match rx.recv_timeout(wait) {
            Ok(msg) => {
                match msg {
                    AgentMsg::Reset => reset(&mut state, &mut episode, &ctx, ResetReason::Command, None),
                    AgentMsg::Perturb(impulse) => {
                        if let Ok(next) = apply_perturbation(&model, &state, &impulse) {
                            state = next;
                            shared.events.push(RuntimeEvent::PerturbationApplied { impulse });
                        }
                    }
                    AgentMsg::SetGoal(g) => {
                        if model.set_goal(&g).is_ok() {
                            goal = g;
                            shared.events.push(RuntimeEvent::GoalChanged { goal: goal.clone() });
                        }
                    }
                    AgentMsg::Pause(p) => {
                        clock.paused = p;
                        deadline = Instant::now();
                    }
                    AgentMsg::Slowdown(f) => clock.slowdown = f,
                }
                let snap = shared.agent.load();
                let mut next = (**snap).clone();
                next.state = state.clone();
                next.episode = episode;
                next.goal = goal.clone();
                next.goal_error = model.goal_error(&state);
                next.clock = clock;
                shared.agent.store(Arc::new(next));
                continue;
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        if clock.paused {
            continue;
        }

        let latest = shared.context.load_full();
        if !Arc::ptr_eq(&latest, &ctx) {
            ctx = latest;
            if ctx.task_id != task_id {
                task_id = ctx.task_id;
                goal = ctx.model.goal().to_vec();
                reset(&mut state, &mut episode, &ctx, ResetReason::TaskChanged, None);
            }
            model = model_with_goal(&ctx, &goal);
        }

        let plan = shared.plan.snapshot();
        let action = action_from_policy(&plan, episode, &state, model.spec());
        let residual = model.residual(&state, &action);
        let stepped = residual.and_then(|r| model.step(&state, &action).map(|(next, _)| (next, r)));
        match stepped {
            Ok((next, r)) if next.is_finite() => {
                steps += 1;
                state = next;
                if let Some(g) = ctx.task.check_transition(&model, &state) {
                    model.set_goal(&g).expect("task goals are validated");
                    goal = g;
                    shared.events.push(RuntimeEvent::GoalChanged { goal: goal.clone() });
                }
                clock.sim_time = state.time;
                let snap = AgentSnapshot {
                    task_id,
                    episode,
                    steps,
                    state: state.clone(),
                    goal: goal.clone(),
                    action,
                    term_costs: ctx.cost.term_values(&r),
                    total_cost: ctx.cost.cost(&r),
                    goal_error: model.goal_error(&state),
                    clock,
                };
                let snap = Arc::new(snap);
                shared.agent.store(snap.clone());
                let mut observers = shared.step_observers.lock().expect("observer list poisoned");
                if !observers.is_empty() {
                    observers.retain(|tx| tx.send(snap.clone()).is_ok());
                }
            }
            outcome => {
                let detail = match outcome {
                    Err(e) => e.to_string(),
                    Ok(_) => "non-finite state".to_string(),
                };
                state.time += model.timestep();
                reset(&mut state, &mut episode, &ctx, ResetReason::Diverged, Some(detail));
                clock.sim_time = state.time;
                let mut snap = snapshot_at(&ctx, &model, task_id, episode, state.clone(), model.spec().neutral_control(), clock);
                snap.steps = steps;
                shared.agent.store(Arc::new(snap));
            }
        }

        let period = Duration::from_secs_f64(model.timestep() * clock.slowdown);
        deadline += period;
        let now = Instant::now();
        if now > deadline + options.max_lag {
            deadline = now;
        }
    }
}

fn planner_loop(shared: Arc<Shared>, mut planner: Box<dyn Planner>, rx: Receiver<PlannerMsg>) {
    let mut task_id = shared.context.load().task_id;
    let mut episode = shared.agent.load().episode;
    while !shared.stop.load(Ordering::Relaxed) {
        while let Ok(msg) = rx.try_recv() {
            let ctx = shared.context.load();
            match msg {
                PlannerMsg::Switch(kind) if kind != planner.kind() => {
                    let settings = planner.settings().clone();
                    if let Ok(mut next) = make_planner(kind, settings, &ctx.model) {
                        next.warm_start(&planner.policy().plan);
                        shared.events.push(RuntimeEvent::PlannerSwitched {
                            from: planner.kind(),
                            to: kind,
                        });
                        planner = next;
                    }
                }
                PlannerMsg::Switch(_) => {}
                PlannerMsg::Setting(name, value) => {
                    // Already validated against the mirrored settings.
                    let _ = planner.set_setting(&name, value);
                }
            }
        }

        let ctx = shared.context.load_full();
        let snap = shared.agent.load_full();
        if snap.task_id != ctx.task_id {
            // The agent has not picked up the new task yet.
            std::thread::yield_now();
            continue;
        }
        let mut model = model_with_goal(&ctx, &snap.goal);
        if ctx.task_id != task_id {
            task_id = ctx.task_id;
            episode = snap.episode;
            if let Ok(p) = make_planner(planner.kind(), ctx.task.settings.clone(), &ctx.model) {
                planner = p;
            }
            planner.reset(&model, snap.state.time);
        } else if snap.episode != episode {
            episode = snap.episode;
            planner.reset(&model, snap.state.time);
        }
        if model.spec().nx() != snap.state.qpos.len() + snap.state.qvel.len() {
            model = ctx.model.clone();
        }

        let start = Instant::now();
        let report = planner.iterate(&snap.state, &model, &ctx.cost);
        let planning_ms = start.elapsed().as_secs_f64() * 1e3;
        if shared.stop.load(Ordering::Relaxed) {
            break;
        }
        let generation = shared
            .plan
            .publish(planner.policy(), planner.kind(), episode, report, planning_ms);
        shared.planner_iterations.fetch_add(1, Ordering::Relaxed);
        shared.events.push(RuntimeEvent::PlanPublished {
            generation,
            planner: planner.kind(),
        });
    }
}
