//! Websocket transport: one session per connection at `/ws`, static UI
//! assets everywhere else.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use tokio::net::TcpListener;
use tokio::time::{interval_at, sleep_until, Instant, MissedTickBehavior};
use tower_http::services::ServeDir;

use crate::engine::{Engine, SessionState};
use crate::protocol::{Body, WireMessage};

#[derive(Debug, Clone, Copy)]
pub struct Timing {
    pub heartbeat: Duration,
    pub idle: Duration,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            heartbeat: Duration::from_secs(5),
            idle: Duration::from_secs(30),
        }
    }
}

struct Shared {
    engine: Engine,
    timing: Timing,
    next_id: AtomicU64,
}

pub fn router(engine: Engine, timing: Timing, assets: Option<PathBuf>) -> Router {
    let shared = Arc::new(Shared {
        engine,
        timing,
        next_id: AtomicU64::new(1),
    });
    let app = Router::new().route("/ws", get(upgrade)).with_state(shared);
    match assets {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Binds `addr` and serves until the task is dropped. Returns the bound
/// address (useful with port 0).
pub async fn bind(
    addr: &str,
    engine: Engine,
    timing: Timing,
    assets: Option<PathBuf>,
) -> std::io::Result<(
    SocketAddr,
    impl std::future::Future<Output = std::io::Result<()>>,
)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(engine, timing, assets);
    Ok((local, async move { axum::serve(listener, app).await }))
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| run(socket, shared))
}

async fn run(mut socket: WebSocket, shared: Arc<Shared>) {
    let id = format!("s{}", shared.next_id.fetch_add(1, Ordering::Relaxed));
    let mut state = SessionState::new(id);
    let timing = shared.timing;
    let mut beat = interval_at(Instant::now() + timing.heartbeat, timing.heartbeat);
    beat.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut deadline = Instant::now() + timing.idle;
    tracing::debug!(session = %state.id, "connected");
    loop {
        tokio::select! {
            frame = socket.recv() => {
                let text = match frame {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    // pongs answer our heartbeat; they are not activity
                    Some(Ok(_)) => continue,
                };
                deadline = Instant::now() + timing.idle;
                let reply = match WireMessage::parse(&text) {
                    Ok(msg) => shared.engine.apply(&mut state, &msg),
                    Err(err) => err,
                };
                let done = matches!(reply.body, Body::End { .. });
                if socket.send(Message::Text(reply.to_text().into())).await.is_err() || done {
                    break;
                }
            }
            _ = beat.tick() => {
                if socket.send(Message::Ping(Vec::new().into())).await.is_err() {
                    break;
                }
            }
            _ = sleep_until(deadline) => {
                tracing::info!(session = %state.id, "idle timeout");
                if let Some(session) = state.session.as_mut().filter(|s| !s.is_ended()) {
                    let duet = session.end().ok();
                    let end = WireMessage::new(Some(state.id.clone()), Body::End { duet });
                    let _ = socket.send(Message::Text(end.to_text().into())).await;
                }
                break;
            }
        }
    }
    let _ = socket.send(Message::Close(None)).await;
    tracing::debug!(session = %state.id, "closed");
}
