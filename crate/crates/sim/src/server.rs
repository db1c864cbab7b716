//! WebSocket front end.
//!
//! One engine thread owns the [`Session`]. Clients submit commands into a
//! single queue; the engine applies them in arrival order, answers the
//! submitter and publishes the new snapshot to everyone. Snapshots are
//! published through a watch channel, so a client only ever sees the
//! sequence number grow.

use std::io::Write;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::{mpsc, oneshot, watch};

use crate::replay::SessionRecorder;
use crate::session::{CommandMessage, Reply, Session, StateSnapshot};

/// Messages a client sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Cmd(CommandMessage),
}

/// Messages the server sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Reply(Reply),
    Snapshot(Box<StateSnapshot>),
}

struct Job {
    cmd: CommandMessage,
    reply: oneshot::Sender<Reply>,
}

/// Published snapshot: its sequence number and serialized message.
#[derive(Debug, Clone)]
pub struct Published {
    pub seq: u64,
    pub json: Arc<str>,
}

/// Cloneable handle for submitting commands to the engine.
#[derive(Clone)]
pub struct EngineHandle {
    jobs: mpsc::Sender<Job>,
    snapshots: watch::Receiver<Published>,
    next_client: Arc<AtomicU64>,
}

#[derive(Debug, thiserror::Error)]
#[error("session engine stopped")]
pub struct EngineStopped;

impl EngineHandle {
    pub async fn submit(&self, cmd: CommandMessage) -> Result<Reply, EngineStopped> {
        let (tx, rx) = oneshot::channel();
        self.jobs.send(Job { cmd, reply: tx }).await.map_err(|_| EngineStopped)?;
        rx.await.map_err(|_| EngineStopped)
    }

    pub fn snapshots(&self) -> watch::Receiver<Published> {
        self.snapshots.clone()
    }

    pub fn latest(&self) -> Published {
        self.snapshots.borrow().clone()
    }

    fn client_id(&self) -> String {
        format!("client-{}", self.next_client.fetch_add(1, Ordering::Relaxed) + 1)
    }
}

fn publish(session: &mut Session) -> Published {
    let snap = session.snapshot();
    let seq = snap.seq;
    let json = serde_json::to_string(&ServerMessage::Snapshot(Box::new(snap))).expect("snapshot serializes");
    Published { seq, json: json.into() }
}

/// Starts the engine thread. It stops once every handle is dropped and
/// returns the final session.
pub fn spawn_engine<W: Write + Send + 'static>(
    mut session: Session,
    mut recorder: Option<SessionRecorder<W>>,
) -> (EngineHandle, std::thread::JoinHandle<Session>) {
    let (jobs_tx, mut jobs_rx) = mpsc::channel::<Job>(256);
    let (snap_tx, snap_rx) = watch::channel(publish(&mut session));
    let thread = std::thread::Builder::new()
        .name("session-engine".into())
        .spawn(move || {
            while let Some(job) = jobs_rx.blocking_recv() {
                if let Some(rec) = recorder.as_mut() {
                    if let Err(e) = rec.record(&job.cmd) {
                        log::error!("session log write failed: {e}");
                    }
                }
                let outcome = session.handle_command(&job.cmd);
                let ok = outcome.reply.ok;
                let _ = job.reply.send(outcome.reply);
                if ok {
                    snap_tx.send_replace(publish(&mut session));
                }
            }
            session
        })
        .expect("spawn engine thread");
    let handle = EngineHandle {
        jobs: jobs_tx,
        snapshots: snap_rx,
        next_client: Arc::new(AtomicU64::new(0)),
    };
    (handle, thread)
}

pub fn router(handle: EngineHandle) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/snapshot", get(latest_snapshot))
        .with_state(handle)
}

async fn latest_snapshot(State(handle): State<EngineHandle>) -> impl IntoResponse {
    (
        [(axum::http::header::CONTENT_TYPE, "application/json")],
        handle.latest().json.to_string(),
    )
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(handle): State<EngineHandle>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client_loop(socket, handle))
}

fn error_reply(request_id: Value, seq: u64, error: String) -> String {
    serde_json::to_string(&ServerMessage::Reply(Reply {
        request_id,
        ok: false,
        seq,
        data: None,
        error: Some(error),
    }))
    .expect("reply serializes")
}

async fn client_loop(socket: WebSocket, handle: EngineHandle) {
    let client = handle.client_id();
    let (mut sink, mut stream) = socket.split();
    let mut snapshots = handle.snapshots();
    let first = snapshots.borrow_and_update().json.to_string();
    if sink.send(Message::Text(first.into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            incoming = stream.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let out = match serde_json::from_str::<ClientMessage>(&text) {
                    Ok(ClientMessage::Cmd(mut cmd)) => {
                        cmd.client_id = Some(client.clone());
                        match handle.submit(cmd).await {
                            Ok(reply) => serde_json::to_string(&ServerMessage::Reply(reply)).expect("reply serializes"),
                            Err(e) => error_reply(Value::Null, handle.latest().seq, e.to_string()),
                        }
                    }
                    Err(e) => {
                        let id = serde_json::from_str::<Value>(&text)
                            .ok()
                            .and_then(|v| v.get("request_id").cloned())
                            .unwrap_or(Value::Null);
                        error_reply(id, handle.latest().seq, format!("malformed message: {e}"))
                    }
                };
                if sink.send(Message::Text(out.into())).await.is_err() {
                    break;
                }
            }
            changed = snapshots.changed() => {
                if changed.is_err() {
                    break;
                }
                let snap = snapshots.borrow_and_update().json.to_string();
                if sink.send(Message::Text(snap.into())).await.is_err() {
                    break;
                }
            }
        }
    }
    log::debug!("{client} disconnected");
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, handle: EngineHandle) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, handle).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, handle: EngineHandle) -> std::io::Result<()> {
    log::info!("listening on ws://{}/ws", listener.local_addr()?);
    axum::serve(listener, router(handle)).await
}
