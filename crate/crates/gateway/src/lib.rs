//! WebSocket gateway between a running [`Simulation`] and operator clients.
//!
//! The control loop stays the only owner of the simulation. It talks to the
//! network side through two bounded queues: commands come in on an `mpsc`
//! channel that the loop drains once per tick, telemetry goes out on a
//! `broadcast` channel. A client that falls behind loses the oldest updates
//! (never the loop's time) and sees the running loss in `dropped`.
//!
//! Every frame is one JSON object followed by `\n`, with `"v": 1`.

mod protocol;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio_tungstenite::tungstenite::Message;

use phri_core::sim::{SimError, Simulation};

pub use protocol::{Ack, AckResult, Command, CommandKind, CommandMsg, ProtocolError, ServerMsg, StateUpdate, PROTOCOL_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("cannot listen on {addr}: {reason}")]
    EndpointUnavailable { addr: String, reason: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("runtime: {0}")]
    Runtime(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    /// `host:port`; port 0 picks a free one.
    pub listen: String,
    /// Publish every `decimation`-th loop iteration.
    pub decimation: u64,
    /// Updates buffered per client before the oldest are dropped.
    pub client_buffer: usize,
    /// Commands buffered between drains; further ones are rejected.
    pub command_queue: usize,
    /// Wall-clock period of one loop iteration; zero runs as fast as possible.
    pub tick_period: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8765".into(),
            decimation: 10,
            client_buffer: 64,
            command_queue: 256,
            tick_period: Duration::from_millis(1),
        }
    }
}

struct Pending {
    msg: CommandMsg,
    reply: oneshot::Sender<Ack>,
}

/// Sim-side end of the gateway. Owns the async runtime serving clients.
pub struct Gateway {
    config: GatewayConfig,
    local_addr: SocketAddr,
    commands: mpsc::Receiver<Pending>,
    updates: broadcast::Sender<Arc<StateUpdate>>,
    iterations: u64,
    published: u64,
    runtime: Option<tokio::runtime::Runtime>,
}

impl Gateway {
    pub fn bind(config: GatewayConfig) -> Result<Self, GatewayError> {
        if config.decimation == 0 || config.client_buffer == 0 || config.command_queue == 0 {
            return Err(GatewayError::Runtime("decimation and queue sizes must be positive".into()));
        }
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| GatewayError::Runtime(e.to_string()))?;
        let unavailable = |e: std::io::Error| GatewayError::EndpointUnavailable { addr: config.listen.clone(), reason: e.to_string() };
        // bound synchronously so this also works when called from async code
        let std_listener = std::net::TcpListener::bind(&config.listen).map_err(unavailable)?;
        std_listener.set_nonblocking(true).map_err(unavailable)?;
        let local_addr = std_listener.local_addr().map_err(unavailable)?;
        let listener = {
            let _guard = runtime.enter();
            TcpListener::from_std(std_listener).map_err(unavailable)?
        };
        let (cmd_tx, commands) = mpsc::channel(config.command_queue);
        let (updates, _) = broadcast::channel(config.client_buffer);
        runtime.spawn(accept_loop(listener, cmd_tx, updates.clone()));
        log::info!("gateway listening on ws://{local_addr}");
        Ok(Self { config, local_addr, commands, updates, iterations: 0, published: 0, runtime: Some(runtime) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn clients(&self) -> usize {
        self.updates.receiver_count()
    }

    /// Applies every queued command in arrival order and acknowledges it.
    pub fn drain_commands(&mut self, sim: &mut Simulation) -> usize {
        let mut n = 0;
        while let Ok(Pending { msg, reply }) = self.commands.try_recv() {
            let result = msg.to_sim_command().and_then(|c| sim.apply(c).map_err(|e| e.to_string()));
            let ack = match result {
                Ok(()) => Ack::accepted(msg.request_id),
                Err(reason) => {
                    log::debug!("rejected {:?} #{}: {reason}", msg.kind, msg.request_id);
                    Ack::rejected(msg.request_id, reason)
                }
            };
            // the client may have gone away meanwhile
            let _ = reply.send(ack);
            n += 1;
        }
        n
    }

    /// Broadcasts the current state. Never blocks.
    pub fn publish(&mut self, sim: &Simulation) {
        self.published += 1;
        let update = StateUpdate::new(self.published, sim.snapshot());
        // no receivers is fine
        let _ = self.updates.send(Arc::new(update));
    }

    /// One loop iteration: drain commands, step, publish on the decimation.
    pub fn tick(&mut self, sim: &mut Simulation) -> Result<(), GatewayError> {
        self.drain_commands(sim);
        sim.step()?;
        self.iterations += 1;
        if self.iterations.is_multiple_of(self.config.decimation) {
            self.publish(sim);
        }
        Ok(())
    }

    /// Runs the loop until `stop` is set or `max_ticks` iterations have passed,
    /// paced by `tick_period`.
    pub fn serve(&mut self, sim: &mut Simulation, stop: &AtomicBool, max_ticks: Option<u64>) -> Result<(), GatewayError> {
        let period = self.config.tick_period;
        let mut next = Instant::now();
        let mut done = 0u64;
        while !stop.load(Ordering::Relaxed) && max_ticks.is_none_or(|m| done < m) {
            self.tick(sim)?;
            done += 1;
            if !period.is_zero() {
                next += period;
                let now = Instant::now();
                if next > now {
                    std::thread::sleep(next - now);
                } else if now - next > period * 100 {
                    // fell far behind; don't try to catch up in a burst
                    next = now;
                }
            }
        }
        Ok(())
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

async fn accept_loop(listener: TcpListener, commands: mpsc::Sender<Pending>, updates: broadcast::Sender<Arc<StateUpdate>>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                let rx = updates.subscribe();
                tokio::spawn(client(stream, peer, commands.clone(), rx));
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

async fn client(stream: TcpStream, peer: SocketAddr, commands: mpsc::Sender<Pending>, mut updates: broadcast::Receiver<Arc<StateUpdate>>) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("{peer}: handshake failed: {e}");
            return;
        }
    };
    log::info!("{peer} connected");
    let (mut sink, mut source) = ws.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<ServerMsg>();
    let mut dropped = 0u64;
    loop {
        tokio::select! {
            update = updates.recv() => match update {
                Ok(u) => {
                    let mut u = (*u).clone();
                    u.dropped = dropped;
                    if send(&mut sink, &ServerMsg::State(u)).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => dropped += n,
                Err(broadcast::error::RecvError::Closed) => break,
            },
            msg = out_rx.recv() => {
                if let Some(m) = msg {
                    if send(&mut sink, &m).await.is_err() {
                        break;
                    }
                }
            }
            frame = source.next() => match frame {
                Some(Ok(Message::Text(text))) => {
                    for line in text.lines().filter(|l| !l.trim().is_empty()) {
                        handle_line(line, &commands, &out_tx);
                    }
                }
                Some(Ok(Message::Close(_))) | None => break,
                Some(Ok(_)) => {}
                Some(Err(e)) => {
                    log::debug!("{peer}: {e}");
                    break;
                }
            },
        }
    }
    log::info!("{peer} disconnected");
}

fn handle_line(line: &str, commands: &mpsc::Sender<Pending>, out: &mpsc::UnboundedSender<ServerMsg>) {
    let msg = match CommandMsg::parse(line) {
        Ok(m) => m,
        Err(e) => {
            let _ = out.send(ServerMsg::Error { reason: e.to_string(), request_id: e.request_id() });
            return;
        }
    };
    let request_id = msg.request_id;
    // payload problems are answered here, before anything reaches the loop
    if let Err(reason) = msg.to_sim_command() {
        let _ = out.send(ServerMsg::Ack(Ack::rejected(request_id, reason)));
        return;
    }
    let (reply, ack) = oneshot::channel();
    if let Err(e) = commands.try_send(Pending { msg, reply }) {
        let reason = match e {
            mpsc::error::TrySendError::Full(_) => "command queue full",
            mpsc::error::TrySendError::Closed(_) => "simulation stopped",
        };
        let _ = out.send(ServerMsg::Ack(Ack::rejected(request_id, reason.into())));
        return;
    }
    let out = out.clone();
    tokio::spawn(async move {
        let ack = ack.await.unwrap_or_else(|_| Ack::rejected(request_id, "simulation stopped".into()));
        let _ = out.send(ServerMsg::Ack(ack));
    });
}

async fn send<S>(sink: &mut S, msg: &ServerMsg) -> Result<(), ()>
where
    S: futures_util::Sink<Message> + Unpin,
{
    let mut text = msg.to_json();
    text.push('\n');
    sink.send(Message::text(text)).await.map_err(|_| ())
}
