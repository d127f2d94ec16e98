//! WebSocket gateway: one session task per client, a single command queue
//! in front of the runtime, and a telemetry ticker fanning frames out over
//! a bounded broadcast channel.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot};

use recede_core::agent::{Runtime, RuntimeOptions};
use recede_core::planner::PlannerKind;
use recede_core::task::{find_task, TaskSpec};

use crate::protocol::{
    task_names, Command, EventRecord, Hello, Request, ServerMessage, TaskSchema, TelemetryFrame,
};

/// Frames buffered per client before the oldest are dropped.
const CLIENT_BUFFER: usize = 64;

#[derive(Clone, Debug)]
pub struct GatewayOptions {
    pub telemetry_hz: f64,
    pub slowdown: f64,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            telemetry_hz: 30.0,
            slowdown: 1.0,
        }
    }
}

type Pending = (Request, oneshot::Sender<ServerMessage>);

/// Shared handle used by every session.
pub struct Gateway {
    runtime: Arc<Runtime>,
    commands: mpsc::Sender<Pending>,
    telemetry: broadcast::Sender<Arc<str>>,
    telemetry_hz: f64,
}

impl Gateway {
    /// Starts the runtime plus the command and telemetry tasks. Must be
    /// called from inside a tokio runtime.
    pub fn start(task: TaskSpec, planner: PlannerKind, options: GatewayOptions) -> recede_core::Result<Arc<Self>> {
        if !(options.telemetry_hz > 0.0 && options.telemetry_hz.is_finite()) {
            return Err(recede_core::Error::InvalidConfig("telemetry rate must be positive".into()));
        }
        let runtime = Arc::new(Runtime::start(
            task,
            planner,
            RuntimeOptions {
                slowdown: options.slowdown,
                ..Default::default()
            },
        )?);
        let (commands, queue) = mpsc::channel(256);
        let (telemetry, _) = broadcast::channel(CLIENT_BUFFER);
        let gateway = Arc::new(Self {
            runtime: runtime.clone(),
            commands,
            telemetry: telemetry.clone(),
            telemetry_hz: options.telemetry_hz,
        });
        tokio::spawn(apply_commands(runtime.clone(), queue));
        tokio::spawn(broadcast_telemetry(Arc::downgrade(&runtime), telemetry, options.telemetry_hz));
        Ok(gateway)
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn schema(&self) -> TaskSchema {
        schema_of(&self.runtime)
    }

    pub fn hello(&self) -> ServerMessage {
        ServerMessage::Hello(Hello {
            server: format!("recede {}", env!("CARGO_PKG_VERSION")),
            tasks: task_names(),
            planners: PlannerKind::ALL.to_vec(),
            telemetry_hz: self.telemetry_hz,
            schema: self.schema(),
        })
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<str>> {
        self.telemetry.subscribe()
    }

    /// Queues a request behind all earlier ones and waits for its reply.
    pub async fn submit(&self, request: Request) -> ServerMessage {
        let id = request.id;
        let (tx, rx) = oneshot::channel();
        if self.commands.send((request, tx)).await.is_err() {
            return ServerMessage::Error {
                id,
                message: "server is shutting down".into(),
            };
        }
        rx.await.unwrap_or(ServerMessage::Error {
            id,
            message: "server is shutting down".into(),
        })
    }

    /// Handles one raw client text message.
    pub async fn handle_text(&self, text: &str) -> ServerMessage {
        match Request::parse(text) {
            Ok(request) => self.submit(request).await,
            Err(e) => e.into(),
        }
    }
}

fn schema_of(runtime: &Runtime) -> TaskSchema {
    TaskSchema::new(&runtime.context(), runtime.planner_kind(), &runtime.planner_settings())
}

/// Applies a validated command; the runtime rejects invalid ones without
/// changing any state.
pub fn apply(runtime: &Runtime, command: Command) -> recede_core::Result<()> {
    match command {
        Command::SetWeight { term, value } => runtime.set_weight(term, value),
        Command::SetRisk { value } => runtime.set_risk(value),
        Command::SetPlanner { planner } => runtime.set_planner(planner),
        Command::SetPlannerSetting { name, value } => runtime.set_planner_setting(&name, value),
        Command::SetSlowdown { factor } => runtime.set_slowdown(factor),
        Command::Pause => runtime.pause(),
        Command::Resume => runtime.resume(),
        Command::Perturb { impulse } => runtime.perturb(impulse),
        Command::SetTask { name } => runtime.set_task(find_task(&name)?),
        Command::SetGoal { goal } => runtime.set_goal(goal),
        Command::Reset => runtime.reset(),
    }
}

async fn apply_commands(runtime: Arc<Runtime>, mut queue: mpsc::Receiver<Pending>) {
    while let Some((request, reply)) = queue.recv().await {
        let name = request.command.name().to_string();
        let message = match apply(&runtime, request.command) {
            Ok(()) => ServerMessage::Ack {
                id: request.id,
                command: name,
            },
            Err(e) => ServerMessage::Error {
                id: request.id,
                message: e.to_string(),
            },
        };
        let _ = reply.send(message);
    }
}

async fn broadcast_telemetry(runtime: std::sync::Weak<Runtime>, out: broadcast::Sender<Arc<str>>, hz: f64) {
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(1.0 / hz));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut seq = 0u64;
    let mut last_time = f64::NEG_INFINITY;
    let mut last_event = 0u64;
    let mut task_id = None;
    loop {
        ticker.tick().await;
        let Some(runtime) = runtime.upgrade() else {
            return;
        };
        let ctx = runtime.context();
        if task_id.is_some_and(|id| id != ctx.task_id) {
            let _ = out.send(ServerMessage::Schema(schema_of(&runtime)).encode().into());
        }
        task_id = Some(ctx.task_id);
        let agent = runtime.agent();
        if agent.clock.sim_time <= last_time {
            continue;
        }
        last_time = agent.clock.sim_time;
        let events: Vec<EventRecord> = runtime
            .events()
            .since(last_event)
            .into_iter()
            .map(|(seq, event)| EventRecord { seq, event })
            .collect();
        if let Some(last) = events.last() {
            last_event = last.seq;
        }
        seq += 1;
        let frame = TelemetryFrame::assemble(
            seq,
            &agent,
            &ctx,
            &runtime.plan(),
            runtime.planner_kind(),
            runtime.planner_iterations(),
            events,
        );
        // No receivers is fine; lagging receivers lose their oldest frames.
        let _ = out.send(ServerMessage::Telemetry(frame).encode().into());
    }
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/ws", get(upgrade))
        .route("/", get(|| async { "recede: connect a WebSocket client to /ws\n" }))
        .with_state(gateway)
}

async fn upgrade(ws: WebSocketUpgrade, State(gateway): State<Arc<Gateway>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| session(socket, gateway))
}

async fn session(socket: WebSocket, gateway: Arc<Gateway>) {
    let mut frames = gateway.subscribe();
    let (mut sink, mut stream) = socket.split();
    if sink.send(Message::Text(gateway.hello().encode().into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            frame = frames.recv() => match frame {
                Ok(text) => {
                    if sink.send(Message::Text(text.as_ref().into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(skipped)) => {
                    log::debug!("slow client skipped {skipped} frames");
                }
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = stream.next() => {
                let reply = match incoming {
                    Some(Ok(Message::Text(text))) => gateway.handle_text(text.as_str()).await,
                    Some(Ok(Message::Binary(_))) => ServerMessage::Error {
                        id: None,
                        message: "binary messages are not supported".into(),
                    },
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                if sink.send(Message::Text(reply.encode().into())).await.is_err() {
                    return;
                }
            }
        }
    }
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, gateway: Arc<Gateway>) -> std::io::Result<()> {
    axum::serve(listener, router(gateway)).await
}

/// Binds `addr` and returns the bound address with the server future.
pub async fn bind(
    addr: SocketAddr,
    gateway: Arc<Gateway>,
) -> std::io::Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, serve(listener, gateway)))
}
