//! JSON wire protocol spoken over the WebSocket.
//!
//! Every server message is one text frame holding an object with a
//! `version` field and a `type` tag (`hello`, `schema`, `telemetry`, `ack`,
//! `error`). Clients send `{"id": 1, "command": "set_weight", "term": 0,
//! "value": 2.5}`-style requests; `id` is optional and echoed in the reply.
//! Non-finite numbers have no JSON encoding, so quantities that can be
//! infinite or undefined are optional and encode as `null`.

use serde::{Deserialize, Serialize};

use recede_core::agent::{AgentSnapshot, PublishedPlan, RuntimeEvent, TaskContext};
use recede_core::objective::Norm;
use recede_core::planner::{PlannerKind, PlannerSettings};
use recede_core::task::registry;

pub const PROTOCOL_VERSION: u32 = 1;

/// Points in the telemetry plan trace, independent of the horizon.
pub const TRACE_POINTS: usize = 50;

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermSchema {
    pub index: usize,
    pub name: String,
    pub weight: f64,
    pub norm: Norm,
    pub offset: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingValue {
    pub name: String,
    pub value: f64,
}

/// Everything a client needs to build controls for the running task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSchema {
    pub name: String,
    pub description: String,
    pub model: String,
    pub nq: usize,
    pub nv: usize,
    pub nu: usize,
    pub timestep: f64,
    /// `null` marks an unbounded control.
    pub control_lower: Vec<Option<f64>>,
    pub control_upper: Vec<Option<f64>>,
    pub goal: Vec<f64>,
    pub terms: Vec<TermSchema>,
    pub risk: f64,
    pub planner: PlannerKind,
    pub settings: Vec<SettingValue>,
}

impl TaskSchema {
    pub fn new(ctx: &TaskContext, planner: PlannerKind, settings: &PlannerSettings) -> Self {
        let spec = ctx.model.spec();
        Self {
            name: ctx.task.name.clone(),
            description: ctx.task.description.clone(),
            model: spec.name.clone(),
            nq: spec.nq,
            nv: spec.nv,
            nu: spec.nu,
            timestep: spec.timestep,
            control_lower: spec.control_lower.iter().copied().map(finite).collect(),
            control_upper: spec.control_upper.iter().copied().map(finite).collect(),
            goal: ctx.model.goal().to_vec(),
            terms: ctx
                .cost
                .terms
                .iter()
                .enumerate()
                .map(|(index, t)| TermSchema {
                    index,
                    name: t.name.clone(),
                    weight: t.weight,
                    norm: t.norm.clone(),
                    offset: t.offset,
                    dim: t.dim,
                })
                .collect(),
            risk: ctx.cost.risk,
            planner,
            settings: setting_values(settings),
        }
    }
}

pub fn setting_values(settings: &PlannerSettings) -> Vec<SettingValue> {
    PlannerSettings::TUNABLE
        .iter()
        .filter_map(|name| {
            settings.get(name).map(|value| SettingValue {
                name: name.to_string(),
                value,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub server: String,
    pub tasks: Vec<String>,
    pub planners: Vec<PlannerKind>,
    pub telemetry_hz: f64,
    pub schema: TaskSchema,
}

/// Open-loop plan sampled at [`TRACE_POINTS`] evenly spaced times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanTrace {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PlanTrace {
    pub fn sample(plan: &recede_core::spline::SplinePlan) -> Self {
        let (t0, t1) = (plan.start_time(), plan.end_time());
        let times: Vec<f64> = (0..TRACE_POINTS)
            .map(|i| match i {
                i if i + 1 == TRACE_POINTS => t1,
                i => t0 + (t1 - t0) * i as f64 / (TRACE_POINTS - 1) as f64,
            })
            .collect();
        let values = times.iter().map(|&t| plan.evaluate(t)).collect();
        Self { times, values }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub event: RuntimeEvent,
}

/// Live readings. Frames go out only when simulated time has advanced, so
/// their `sim_time` values are strictly increasing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub seq: u64,
    pub sim_time: f64,
    pub episode: u64,
    pub task: String,
    pub qpos: Vec<f64>,
    pub qvel: Vec<f64>,
    pub action: Vec<f64>,
    pub goal: Vec<f64>,
    pub goal_error: f64,
    pub term_costs: Vec<f64>,
    pub total_cost: f64,
    pub weights: Vec<f64>,
    pub risk: f64,
    pub planner: PlannerKind,
    pub plan_generation: u64,
    /// Wall time of the iteration that produced the current plan.
    pub planning_ms: Option<f64>,
    pub planner_iterations: u64,
    pub nominal_cost: Option<f64>,
    pub best_cost: Option<f64>,
    pub worst_cost: Option<f64>,
    pub expected_improvement: Option<f64>,
    pub regularization: Option<f64>,
    pub plan: Option<PlanTrace>,
    pub slowdown: f64,
    pub paused: bool,
    pub events: Vec<EventRecord>,
}

impl TelemetryFrame {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        seq: u64,
        agent: &AgentSnapshot,
        ctx: &TaskContext,
        plan: &PublishedPlan,
        planner: PlannerKind,
        planner_iterations: u64,
        events: Vec<EventRecord>,
    ) -> Self {
        let published = plan.policy.is_some();
        let report = &plan.report;
        Self {
            seq,
            sim_time: agent.clock.sim_time,
            episode: agent.episode,
            task: ctx.task.name.clone(),
            qpos: agent.state.qpos.clone(),
            qvel: agent.state.qvel.clone(),
            action: agent.action.clone(),
            goal: agent.goal.clone(),
            goal_error: agent.goal_error,
            term_costs: agent.term_costs.clone(),
            total_cost: agent.total_cost,
            weights: ctx.cost.terms.iter().map(|t| t.weight).collect(),
            risk: ctx.cost.risk,
            planner,
            plan_generation: plan.generation,
            planning_ms: published.then_some(plan.planning_ms).and_then(finite),
            planner_iterations,
            nominal_cost: published.then_some(report.nominal_cost).and_then(finite),
            best_cost: published.then_some(report.best_cost).and_then(finite),
            worst_cost: published.then_some(report.worst_cost).and_then(finite),
            expected_improvement: report.expected_improvement.and_then(finite),
            regularization: report.regularization.and_then(finite),
            plan: plan.policy.as_ref().map(|p| PlanTrace::sample(&p.plan)),
            slowdown: agent.clock.slowdown,
            paused: agent.clock.paused,
            events,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello(Hello),
    /// Sent to every client after the task changes.
    Schema(TaskSchema),
    Telemetry(TelemetryFrame),
    Ack { id: Option<u64>, command: String },
    Error { id: Option<u64>, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub version: u32,
    #[serde(flatten)]
    pub message: ServerMessage,
}

impl ServerMessage {
    pub fn encode(&self) -> String {
        serde_json::to_string(&Envelope {
            version: PROTOCOL_VERSION,
            message: self.clone(),
        })
        .expect("server messages serialize")
    }

    pub fn decode(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str::<Envelope>(text).map(|e| e.message)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    SetWeight { term: usize, value: f64 },
    SetRisk { value: f64 },
    SetPlanner { planner: PlannerKind },
    SetPlannerSetting { name: String, value: f64 },
    SetSlowdown { factor: f64 },
    Pause,
    Resume,
    Perturb { impulse: Vec<f64> },
    SetTask { name: String },
    SetGoal { goal: Vec<f64> },
    Reset,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SetWeight { .. } => "set_weight",
            Command::SetRisk { .. } => "set_risk",
            Command::SetPlanner { .. } => "set_planner",
            Command::SetPlannerSetting { .. } => "set_planner_setting",
            Command::SetSlowdown { .. } => "set_slowdown",
            Command::Pause => "pause",
            Command::Resume => "resume",
            Command::Perturb { .. } => "perturb",
            Command::SetTask { .. } => "set_task",
            Command::SetGoal { .. } => "set_goal",
            Command::Reset => "reset",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(flatten)]
    pub command: Command,
}

/// A client message that could not be turned into a [`Request`].
#[derive(Clone, Debug, PartialEq)]
pub struct RequestError {
    /// Request id, when one could be read.
    pub id: Option<u64>,
    pub message: String,
}

impl From<RequestError> for ServerMessage {
    fn from(e: RequestError) -> Self {
        ServerMessage::Error {
            id: e.id,
            message: e.message,
        }
    }
}

impl Request {
    pub fn parse(text: &str) -> Result<Self, RequestError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| RequestError {
            id: None,
            message: format!("malformed message: {e}"),
        })?;
        let id = value.get("id").and_then(serde_json::Value::as_u64);
        let request: Request = serde_json::from_value(value).map_err(|e| RequestError {
            id,
            message: format!("invalid command: {e}"),
        })?;
        match request.version {
            Some(v) if v != PROTOCOL_VERSION => Err(RequestError {
                id,
                message: format!("unsupported protocol version {v}, server speaks {PROTOCOL_VERSION}"),
            }),
            _ => Ok(request),
        }
    }
}

pub fn task_names() -> Vec<String> {
    registry().into_iter().map(|t| t.name).collect()
}
