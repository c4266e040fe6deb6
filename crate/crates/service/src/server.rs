//! One fixed-rate session loop per websocket connection.
//!
//! Commands flow reader → bounded mpsc → loop; the loop drains them between
//! ticks so a config change never lands mid-decision. Outgoing frames go
//! through a broadcast ring of `backlog` messages, so a slow client loses
//! its oldest unsent ticks instead of stalling the simulation.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State as AxumState;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use latshield_core::filter::FilterConfig;
use latshield_core::rng::mix64;
use latshield_core::session::{Command, ModelBundle, Session};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};
use tokio::task::JoinHandle;

use crate::protocol::{parse_client, ServerMessage};

/// Inbound commands queued per connection before the reader waits.
const COMMAND_QUEUE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub tick_hz: f64,
    pub filter: FilterConfig,
    /// Unsent outgoing frames kept per client before the oldest are dropped.
    pub backlog: usize,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            tick_hz: 20.0,
            filter: FilterConfig::default(),
            backlog: 64,
            seed: 0,
        }
    }
}

impl ServiceConfig {
    pub fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.tick_hz)
    }
}

#[derive(Clone)]
pub struct AppState {
    bundle: Arc<ModelBundle>,
    config: ServiceConfig,
    sessions: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(bundle: Arc<ModelBundle>, config: ServiceConfig) -> latshield_core::Result<Self> {
        config.filter.validate()?;
        if !(config.tick_hz > 0.0) || config.backlog == 0 {
            return Err(latshield_core::Error::Config("tick_hz and backlog must be positive".into()));
        }
        if !bundle.supports(config.filter.mode) {
            return Err(latshield_core::Error::ModeMismatch(format!(
                "checkpoint directory has no models for mode {}",
                config.filter.mode.as_str()
            )));
        }
        Ok(Self {
            bundle,
            config,
            sessions: Arc::new(AtomicU64::new(0)),
        })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new().route("/ws", get(upgrade)).with_state(state)
}

/// Binds `addr` and serves in a background task; returns the bound address.
pub async fn spawn_server(addr: SocketAddr, state: AppState) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router(state)).await {
            warn!("server stopped: {e}");
        }
    });
    Ok((local, handle))
}

async fn upgrade(ws: WebSocketUpgrade, AxumState(state): AxumState<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

type Inbound = Result<Command, &'static str>;

async fn connection(socket: WebSocket, state: AppState) {
    let id = state.sessions.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut stream) = socket.split();
    let session = match Session::new(state.bundle.clone(), state.config.filter, mix64(state.config.seed ^ id)) {
        Ok(s) => s,
        Err(e) => {
            warn!("session {id}: {e}");
            let _ = sink.send(text(ServerMessage::error("session_unavailable").to_json())).await;
            return;
        }
    };
    info!("session {id} opened");

    let (out_tx, mut out_rx) = broadcast::channel::<String>(state.config.backlog);
    let writer = tokio::spawn(async move {
        loop {
            match out_rx.recv().await {
                Ok(frame) => {
                    if sink.send(text(frame)).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => debug!("session {id}: dropped {n} stale frames"),
                Err(broadcast::error::RecvError::Closed) => break,
            }
        }
    });

    let (cmd_tx, cmd_rx) = mpsc::channel::<Inbound>(COMMAND_QUEUE);
    let reader = async move {
        while let Some(Ok(msg)) = stream.next().await {
            let cmd = match msg {
                Message::Text(t) => parse_client(t.as_str()).and_then(|m| m.into_command()),
                Message::Close(_) => break,
                _ => continue,
            };
            if cmd_tx.send(cmd).await.is_err() {
                break;
            }
        }
    };

    let _ = out_tx.send(ServerMessage::hello(&state.bundle.params).to_json());
    let reader = tokio::spawn(reader);
    run_session(session, cmd_rx, out_tx, state.config.period(), std::future::pending::<()>()).await;
    reader.abort();
    let _ = writer.await;
    info!("session {id} closed");
}

fn text(s: String) -> Message {
    Message::Text(s.into())
}

/// Ticks `session` every `period` until the command channel closes (the
/// client went away) or `stop` resolves. Each tick first applies every queued
/// command, then filters and steps once, then publishes the tick.
pub async fn run_session(
    mut session: Session,
    mut commands: mpsc::Receiver<Inbound>,
    out: broadcast::Sender<String>,
    period: Duration,
    stop: impl Future<Output = ()>,
) {
    let mut interval = tokio::time::interval(period);
    tokio::pin!(stop);
    loop {
        tokio::select! {
            _ = &mut stop => return,
            _ = interval.tick() => {}
        }
        loop {
            match commands.try_recv() {
                Ok(Ok(cmd)) => {
                    if let Err(e) = session.handle(cmd) {
                        let _ = out.send(ServerMessage::error(e.code()).to_json());
                    }
                }
                Ok(Err(code)) => {
                    let _ = out.send(ServerMessage::error(code).to_json());
                }
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => return,
            }
        }
        match session.tick() {
            Ok(r) => {
                let _ = out.send(ServerMessage::tick(&r).to_json());
            }
            Err(e) => {
                warn!("tick failed: {e}");
                let _ = out.send(ServerMessage::error("internal").to_json());
                return;
            }
        }
    }
}
