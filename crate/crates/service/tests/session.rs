use std::net::SocketAddr;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

use recede_core::planner::PlannerKind;
use recede_core::task::find_task;
use recede_service::protocol::{ServerMessage, TelemetryFrame};
use recede_service::server::{bind, Gateway, GatewayOptions};

type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn start_server() -> SocketAddr {
    let task = find_task("pendulum-swingup").unwrap();
    let gateway = Gateway::start(task, PlannerKind::Sampling, GatewayOptions::default()).unwrap();
    let (addr, server) = bind(SocketAddr::from(([127, 0, 0, 1], 0)), gateway).await.unwrap();
    tokio::spawn(server);
    addr
}

async fn connect(addr: SocketAddr) -> Socket {
    let (socket, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    socket
}

async fn next_message(socket: &mut Socket) -> ServerMessage {
    loop {
        let msg = timeout(Duration::from_secs(5), socket.next())
            .await
            .expect("server went quiet")
            .expect("socket closed")
            .unwrap();
        if let Message::Text(text) = msg {
            return ServerMessage::decode(text.as_str()).unwrap();
        }
    }
}

async fn send(socket: &mut Socket, text: &str) {
    socket.send(Message::text(text)).await.unwrap();
}

/// Skips telemetry until a reply (ack or error) arrives.
async fn reply(socket: &mut Socket) -> ServerMessage {
    loop {
        match next_message(socket).await {
            ServerMessage::Telemetry(_) | ServerMessage::Schema(_) => continue,
            other => return other,
        }
    }
}

async fn frame_where(socket: &mut Socket, mut pred: impl FnMut(&TelemetryFrame) -> bool) -> TelemetryFrame {
    loop {
        if let ServerMessage::Telemetry(frame) = next_message(socket).await {
            if pred(&frame) {
                return frame;
            }
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn session_hello_commands_and_telemetry() {
    let addr = start_server().await;
    let mut ws = connect(addr).await;

    let ServerMessage::Hello(hello) = next_message(&mut ws).await else {
        panic!("first message must be hello");
    };
    assert_eq!(hello.schema.name, "pendulum-swingup");
    assert_eq!(hello.schema.planner, PlannerKind::Sampling);
    assert!(hello.tasks.contains(&"cartpole-swingup".to_string()));
    assert!(hello.schema.settings.iter().any(|s| s.name == "samples"));
    let original = hello.schema.terms[0].weight;

    // Frames arrive with strictly increasing time and sequence numbers.
    let mut last: Option<TelemetryFrame> = None;
    for _ in 0..5 {
        let frame = frame_where(&mut ws, |_| true).await;
        if let Some(prev) = &last {
            assert!(frame.sim_time > prev.sim_time && frame.seq > prev.seq);
        }
        last = Some(frame);
    }

    send(&mut ws, r#"{"id":1,"command":"set_weight","term":0,"value":3.5}"#).await;
    assert_eq!(
        reply(&mut ws).await,
        ServerMessage::Ack {
            id: Some(1),
            command: "set_weight".into()
        }
    );
    frame_where(&mut ws, |f| f.weights[0] == 3.5).await;

    // Rejected commands leave state untouched.
    send(&mut ws, r#"{"id":2,"command":"set_weight","term":42,"value":1}"#).await;
    let ServerMessage::Error { id, message } = reply(&mut ws).await else {
        panic!("unknown term must be rejected");
    };
    assert_eq!(id, Some(2));
    assert!(message.contains("42"), "{message}");
    send(&mut ws, r#"{"id":3,"command":"set_weight","term":0,"value":-1}"#).await;
    assert!(matches!(reply(&mut ws).await, ServerMessage::Error { id: Some(3), .. }));
    send(&mut ws, "definitely not json").await;
    assert!(matches!(reply(&mut ws).await, ServerMessage::Error { id: None, .. }));
    let frame = frame_where(&mut ws, |_| true).await;
    assert_eq!(frame.weights[0], 3.5);
    assert_ne!(original, 3.5);

    send(&mut ws, r#"{"id":4,"command":"perturb","impulse":[5.0]}"#).await;
    assert!(matches!(reply(&mut ws).await, ServerMessage::Ack { id: Some(4), .. }));
    frame_where(&mut ws, |f| {
        f.events
            .iter()
            .any(|e| matches!(&e.event, recede_core::agent::RuntimeEvent::PerturbationApplied { impulse } if impulse == &[5.0]))
    })
    .await;

    send(&mut ws, r#"{"id":5,"command":"set_planner","planner":"ilqg"}"#).await;
    assert!(matches!(reply(&mut ws).await, ServerMessage::Ack { id: Some(5), .. }));
    frame_where(&mut ws, |f| f.planner == PlannerKind::Ilqg && f.regularization.is_some()).await;

    send(&mut ws, r#"{"id":6,"command":"set_slowdown","factor":0.5}"#).await;
    assert!(matches!(reply(&mut ws).await, ServerMessage::Error { id: Some(6), .. }));
    send(&mut ws, r#"{"id":7,"command":"set_slowdown","factor":2}"#).await;
    assert!(matches!(reply(&mut ws).await, ServerMessage::Ack { id: Some(7), .. }));
    frame_where(&mut ws, |f| f.slowdown == 2.0).await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn task_switch_reaches_every_client() {
    let addr = start_server().await;
    let mut a = connect(addr).await;
    let mut b = connect(addr).await;
    assert!(matches!(next_message(&mut a).await, ServerMessage::Hello(_)));
    assert!(matches!(next_message(&mut b).await, ServerMessage::Hello(_)));

    send(&mut a, r#"{"id":1,"command":"set_task","name":"particle-waypoints"}"#).await;
    assert!(matches!(reply(&mut a).await, ServerMessage::Ack { id: Some(1), .. }));
    let schema = loop {
        if let ServerMessage::Schema(s) = next_message(&mut b).await {
            break s;
        }
    };
    assert_eq!(schema.name, "particle-waypoints");
    assert_eq!(schema.nu, 2);
    frame_where(&mut b, |f| f.task == "particle-waypoints" && f.qpos.len() == 2).await;

    send(&mut b, r#"{"id":2,"command":"set_goal","goal":[0.25,-0.25]}"#).await;
    assert!(matches!(reply(&mut b).await, ServerMessage::Ack { id: Some(2), .. }));
    frame_where(&mut a, |f| f.goal == [0.25, -0.25]).await;

    send(&mut b, r#"{"id":3,"command":"set_task","name":"nope"}"#).await;
    assert!(matches!(reply(&mut b).await, ServerMessage::Error { id: Some(3), .. }));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_edits_are_applied_one_at_a_time() {
    let addr = start_server().await;
    let mut clients = Vec::new();
    for _ in 0..2 {
        let mut ws = connect(addr).await;
        assert!(matches!(next_message(&mut ws).await, ServerMessage::Hello(_)));
        clients.push(ws);
    }
    let mut handles = Vec::new();
    for (c, mut ws) in clients.into_iter().enumerate() {
        handles.push(tokio::spawn(async move {
            for k in 0..20u64 {
                let value = (c * 100) as f64 + k as f64;
                let id = c as u64 * 1000 + k;
                send(&mut ws, &format!(r#"{{"id":{id},"command":"set_weight","term":1,"value":{value}}}"#)).await;
                send(&mut ws, &format!(r#"{{"id":{},"command":"set_risk","value":{}}}"#, id + 500, k as f64 / 10.0)).await;
            }
            let mut acks = Vec::new();
            while acks.len() < 40 {
                if let ServerMessage::Ack { id: Some(id), .. } = reply(&mut ws).await {
                    acks.push(id);
                }
            }
            (ws, acks)
        }));
    }
    let mut sockets = Vec::new();
    for h in handles {
        let (ws, acks) = h.await.unwrap();
        // Each client's replies come back in the order it sent them.
        let mut sorted = acks.clone();
        sorted.sort_by_key(|id| (id % 500, id % 1000 >= 500));
        assert_eq!(acks, sorted);
        sockets.push(ws);
    }
    let settled = frame_where(&mut sockets[0], |f| (f.weights[1] == 19.0 || f.weights[1] == 119.0) && f.risk == 1.9);
    timeout(Duration::from_secs(10), settled).await.expect("final edits never showed up");
}
