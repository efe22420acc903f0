//! Live clients against a gateway driving a real simulation.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::json;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use phri_core::lowlevel::LowLevelKind;
use phri_core::model::default_gen3_model;
use phri_core::modes::ComplianceMode;
use phri_core::sim::{SimConfig, Simulation};
use phri_gateway::{Ack, AckResult, Gateway, GatewayConfig, GatewayError, ServerMsg, StateUpdate};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Running {
    url: String,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Simulation>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn start(lowlevel: LowLevelKind) -> Running {
    let cfg = GatewayConfig { listen: "127.0.0.1:0".into(), ..GatewayConfig::default() };
    let mut gw = Gateway::bind(cfg).unwrap();
    let url = format!("ws://{}", gw.local_addr());
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::spawn(move || {
        let mut sim = Simulation::new(default_gen3_model(), SimConfig { lowlevel, ..SimConfig::default() }).unwrap();
        gw.serve(&mut sim, &flag, None).unwrap();
        sim
    });
    Running { url, stop, thread: Some(thread) }
}

async fn connect(url: &str) -> Ws {
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

async fn next_msg(ws: &mut Ws) -> ServerMsg {
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.expect("no message within 5 s").unwrap().unwrap();
        if let Message::Text(t) = frame {
            return ServerMsg::parse(t.trim_end()).unwrap();
        }
    }
}

async fn next_state(ws: &mut Ws) -> StateUpdate {
    loop {
        if let ServerMsg::State(s) = next_msg(ws).await {
            return s;
        }
    }
}

/// Sends a command and returns its ack plus the first update after it.
async fn command(ws: &mut Ws, request_id: u64, kind: &str, payload: serde_json::Value) -> (Ack, StateUpdate) {
    let msg = json!({"v": 1, "request_id": request_id, "kind": kind, "payload": payload});
    ws.send(Message::text(msg.to_string())).await.unwrap();
    let ack = loop {
        match next_msg(ws).await {
            ServerMsg::Ack(a) => break a,
            ServerMsg::Error { reason, .. } => panic!("error reply: {reason}"),
            ServerMsg::State(_) => {}
        }
    };
    (ack, next_state(ws).await)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn set_mode_round_trip() {
    let gw = start(LowLevelKind::PhriTorque);
    let mut ws = connect(&gw.url).await;
    assert_eq!(next_state(&mut ws).await.snapshot.mode, ComplianceMode::NullSpace);
    let (ack, update) = command(&mut ws, 41, "set_mode", json!({"mode": "full_body"})).await;
    assert_eq!(ack, Ack::accepted(41));
    assert_eq!(update.snapshot.mode, ComplianceMode::FullBody);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn dual_rejected_under_position_control() {
    let gw = start(LowLevelKind::Position);
    let mut ws = connect(&gw.url).await;
    let (ack, update) = command(&mut ws, 1, "set_mode", json!({"mode": "dual"})).await;
    assert_eq!(ack.result, AckResult::Rejected);
    assert!(!ack.reason.unwrap_or_default().is_empty());
    assert_eq!(update.snapshot.mode, ComplianceMode::NullSpace);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn wrench_bounds() {
    let gw = start(LowLevelKind::PhriTorque);
    let mut ws = connect(&gw.url).await;
    let zero = json!({"frame": "ee", "wrench": [0, 0, 0, 0, 0, 0], "duration_ms": 100});
    assert_eq!(command(&mut ws, 1, "apply_wrench", zero).await.0, Ack::accepted(1));
    let huge = json!({"frame": "ee", "wrench": [1000, 0, 0, 0, 0, 0], "duration_ms": 100});
    let (ack, _) = command(&mut ws, 2, "apply_wrench", huge).await;
    assert_eq!(ack.result, AckResult::Rejected);
    let nowhere = json!({"frame": "tail_link", "wrench": [1, 0, 0, 0, 0, 0], "duration_ms": 100});
    assert_eq!(command(&mut ws, 3, "apply_wrench", nowhere).await.0.result, AckResult::Rejected);
    let malformed = json!({"frame": "ee", "wrench": [1, 0, 0], "duration_ms": 100});
    assert_eq!(command(&mut ws, 4, "apply_wrench", malformed).await.0.result, AckResult::Rejected);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn push_moves_tool_in_full_body_mode() {
    let gw = start(LowLevelKind::PhriTorque);
    let mut ws = connect(&gw.url).await;
    let (ack, before) = command(&mut ws, 1, "set_mode", json!({"mode": "full_body"})).await;
    assert_eq!(ack.result, AckResult::Accepted);
    let push = json!({"frame": "ee", "wrench": [0, 10, 0, 0, 0, 0], "duration_ms": 500});
    command(&mut ws, 2, "apply_wrench", push).await;
    let y0 = before.snapshot.ee_pose[1];
    let mut peak = 0.0f64;
    let mut last = before;
    // 1.5 s of telemetry
    for _ in 0..150 {
        last = next_state(&mut ws).await;
        peak = peak.max(last.snapshot.ee_pose[1] - y0);
    }
    assert!(peak > 1e-3, "tool moved only {peak} m");
    let speed: f64 = last.snapshot.dq.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(speed < 0.05, "still moving at {speed} rad/s");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn clients_share_one_stream() {
    let gw = start(LowLevelKind::PhriTorque);
    let mut a = connect(&gw.url).await;
    let mut b = connect(&gw.url).await;
    let mut sa: Vec<(u64, f64)> = Vec::new();
    let mut sb: Vec<(u64, f64)> = Vec::new();
    for _ in 0..40 {
        let u = next_state(&mut a).await;
        sa.push((u.snapshot.seq, u.snapshot.t));
        let u = next_state(&mut b).await;
        sb.push((u.snapshot.seq, u.snapshot.t));
    }
    assert!(sa.windows(2).all(|w| w[1].0 > w[0].0));
    // align on the later subscriber's first update
    let start = sa[0].0.max(sb[0].0);
    let ka: Vec<_> = sa.iter().filter(|x| x.0 >= start).collect();
    let kb: Vec<_> = sb.iter().filter(|x| x.0 >= start).collect();
    let n = ka.len().min(kb.len());
    assert!(n >= 30);
    assert_eq!(ka[..n], kb[..n]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn pause_and_emergency_are_reported() {
    let gw = start(LowLevelKind::PhriTorque);
    let mut ws = connect(&gw.url).await;
    let (_, u) = command(&mut ws, 1, "pause", serde_json::Value::Null).await;
    assert!(u.snapshot.paused);
    let t = u.snapshot.t;
    let later = next_state(&mut ws).await;
    assert!(later.snapshot.seq > u.snapshot.seq);
    assert_eq!(later.snapshot.t, t);
    command(&mut ws, 2, "resume", serde_json::Value::Null).await;
    let (_, u) = command(&mut ws, 3, "emergency_stop", serde_json::Value::Null).await;
    assert!(u.snapshot.emergency);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_frames_get_errors_and_the_session_survives() {
    let gw = start(LowLevelKind::PhriTorque);
    let mut ws = connect(&gw.url).await;
    ws.send(Message::text("{not json")).await.unwrap();
    loop {
        match next_msg(&mut ws).await {
            ServerMsg::Error { request_id, .. } => {
                assert_eq!(request_id, None);
                break;
            }
            ServerMsg::Ack(a) => panic!("unexpected {a:?}"),
            ServerMsg::State(_) => {}
        }
    }
    let (ack, _) = command(&mut ws, 5, "clear_wrench", serde_json::Value::Null).await;
    assert_eq!(ack, Ack::accepted(5));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn slow_client_loses_oldest_updates() {
    let cfg = GatewayConfig { listen: "127.0.0.1:0".into(), decimation: 1, client_buffer: 4, tick_period: Duration::ZERO, ..Default::default() };
    let mut gw = Gateway::bind(cfg).unwrap();
    let url = format!("ws://{}", gw.local_addr());
    let mut ws = connect(&url).await;
    // wait for the subscription to exist
    while gw.clients() == 0 {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let mut sim = Simulation::new(default_gen3_model(), SimConfig::default()).unwrap();
    let started = std::time::Instant::now();
    for _ in 0..200 {
        gw.tick(&mut sim).unwrap();
    }
    // nobody was reading, yet the loop ran unhindered
    assert!(started.elapsed() < Duration::from_secs(5));
    let mut seen = Vec::new();
    let mut dropped = 0;
    while let Ok(Some(Ok(Message::Text(t)))) = tokio::time::timeout(Duration::from_millis(300), ws.next()).await {
        if let ServerMsg::State(s) = ServerMsg::parse(t.trim_end()).unwrap() {
            seen.push(s.snapshot.seq);
            dropped = s.dropped;
        }
    }
    assert!(seen.len() < 200, "received {}", seen.len());
    assert_eq!(*seen.last().unwrap(), 200);
    assert!(dropped > 0);
    assert!(seen.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn busy_endpoint_is_reported() {
    let first = Gateway::bind(GatewayConfig { listen: "127.0.0.1:0".into(), ..Default::default() }).unwrap();
    let taken = first.local_addr().to_string();
    match Gateway::bind(GatewayConfig { listen: taken, ..Default::default() }) {
        Err(GatewayError::EndpointUnavailable { .. }) => {}
        Err(e) => panic!("wrong error {e}"),
        Ok(_) => panic!("second bind succeeded"),
    }
}
