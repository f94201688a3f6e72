//! Live subset stream: every detector batch is pushed as one JSON array text
//! frame to each websocket subscribed at `/events/<region_id>`.
//!
//! Each subscriber owns a bounded queue of [`SUBSCRIBER_QUEUE_DEPTH`]
//! batches. A subscriber whose queue is full is disconnected with close code
//! [`OVERFLOW_CLOSE_CODE`]; the others are unaffected.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::model::IdlingEvent;

pub const SUBSCRIBER_QUEUE_DEPTH: usize = 64;
/// "Try again later".
pub const OVERFLOW_CLOSE_CODE: u16 = 1013;
/// "Going away".
pub const SHUTDOWN_CLOSE_CODE: u16 = 1001;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("failed to bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown region {0}")]
    UnknownRegion(String),
}

/// Serializes a batch exactly as it goes on the wire.
pub fn encode_batch(batch: &[IdlingEvent]) -> String {
    serde_json::to_string(batch).expect("idling events always serialize")
}

enum Outbound {
    Batch(Arc<str>),
    Close(u16),
}

/// One live websocket.
pub struct Subscription {
    pub id: u64,
    pub region_id: String,
    pub connected_at: SystemTime,
    tx: mpsc::Sender<Outbound>,
}

/// Region → live subscriptions. Cheap to clone; shared by pipelines and the server.
#[derive(Clone, Default)]
pub struct Broadcaster {
    inner: Arc<Inner>,
}

#[derive(Default)]
struct Inner {
    regions: Mutex<HashMap<String, Vec<Subscription>>>,
    next_id: AtomicU64,
}

impl Broadcaster {
    pub fn new<I, S>(regions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let b = Self::default();
        {
            let mut map = b.inner.regions.lock().unwrap();
            for r in regions {
                map.entry(r.into()).or_default();
            }
        }
        b
    }

    pub fn has_region(&self, region_id: &str) -> bool {
        self.inner.regions.lock().unwrap().contains_key(region_id)
    }

    pub fn subscriber_count(&self, region_id: &str) -> usize {
        self.inner
            .regions
            .lock()
            .unwrap()
            .get(region_id)
            .map_or(0, Vec::len)
    }

    fn subscribe(&self, region_id: &str) -> Result<(u64, mpsc::Receiver<Outbound>), StreamError> {
        let mut map = self.inner.regions.lock().unwrap();
        let subs = map
            .get_mut(region_id)
            .ok_or_else(|| StreamError::UnknownRegion(region_id.to_string()))?;
        // one extra slot so an overflow close can always be queued
        let (tx, rx) = mpsc::channel(SUBSCRIBER_QUEUE_DEPTH + 1);
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        subs.push(Subscription {
            id,
            region_id: region_id.to_string(),
            connected_at: SystemTime::now(),
            tx,
        });
        Ok((id, rx))
    }

    fn unsubscribe(&self, region_id: &str, id: u64) {
        if let Some(subs) = self.inner.regions.lock().unwrap().get_mut(region_id) {
            subs.retain(|s| s.id != id);
        }
    }

    /// Sends `batch` to every subscriber of the region and returns how many
    /// accepted it. Never blocks; full or closed subscribers are dropped.
    pub fn broadcast(&self, region_id: &str, batch: &[IdlingEvent]) -> usize {
        let payload: Arc<str> = encode_batch(batch).into();
        let mut map = self.inner.regions.lock().unwrap();
        let Some(subs) = map.get_mut(region_id) else {
            return 0;
        };
        let mut delivered = 0;
        subs.retain(|s| {
            // leave the spare slot for the close frame
            if s.tx.capacity() <= 1 {
                tracing::warn!(region = region_id, subscriber = s.id, "subscriber queue full, disconnecting");
                let _ = s.tx.try_send(Outbound::Close(OVERFLOW_CLOSE_CODE));
                return false;
            }
            match s.tx.try_send(Outbound::Batch(payload.clone())) {
                Ok(()) => {
                    delivered += 1;
                    true
                }
                Err(_) => false,
            }
        });
        delivered
    }

    /// Closes every subscription.
    pub fn close_all(&self) {
        let mut map = self.inner.regions.lock().unwrap();
        for subs in map.values_mut() {
            for s in subs.drain(..) {
                let _ = s.tx.try_send(Outbound::Close(SHUTDOWN_CLOSE_CODE));
            }
        }
    }
}

async fn subscribe_handler(
    State(hub): State<Broadcaster>,
    Path(region_id): Path<String>,
    ws: WebSocketUpgrade,
) -> Response {
    if !hub.has_region(&region_id) {
        return (StatusCode::NOT_FOUND, format!("unknown region {region_id}")).into_response();
    }
    ws.on_upgrade(move |socket| async move {
        match hub.subscribe(&region_id) {
            Ok((id, rx)) => {
                pump(socket, rx).await;
                hub.unsubscribe(&region_id, id);
            }
            Err(e) => tracing::warn!(error = %e, "subscription vanished"),
        }
    })
}

async fn pump(mut socket: WebSocket, mut rx: mpsc::Receiver<Outbound>) {
    loop {
        tokio::select! {
            out = rx.recv() => match out {
                Some(Outbound::Batch(text)) => {
                    if socket.send(Message::Text(text.to_string())).await.is_err() {
                        return;
                    }
                }
                Some(Outbound::Close(code)) => {
                    let _ = socket
                        .send(Message::Close(Some(CloseFrame { code, reason: "".into() })))
                        .await;
                    return;
                }
                None => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            },
            incoming = socket.recv() => match incoming {
                // clients only listen; anything but a close is ignored
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

pub fn router(hub: Broadcaster) -> Router {
    Router::new()
        .route("/events/:region_id", get(subscribe_handler))
        .with_state(hub)
}

/// Handle to a running stream server.
pub struct StreamServer {
    local_addr: SocketAddr,
    hub: Broadcaster,
    cancel: CancellationToken,
    task: JoinHandle<()>,
}

impl StreamServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn broadcaster(&self) -> &Broadcaster {
        &self.hub
    }

    /// Closes all subscriptions and waits for the server to stop.
    pub async fn shutdown(self) {
        self.hub.close_all();
        self.cancel.cancel();
        let _ = self.task.await;
    }
}

/// Binds `addr` and serves `/events/<region_id>` for the hub's regions.
pub async fn serve(hub: Broadcaster, addr: SocketAddr) -> Result<StreamServer, StreamError> {
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| StreamError::BindFailure { addr, source })?;
    let local_addr = listener
        .local_addr()
        .map_err(|source| StreamError::BindFailure { addr, source })?;
    let cancel = CancellationToken::new();
    let token = cancel.clone();
    let app = router(hub.clone());
    let task = tokio::spawn(async move {
        let res = axum::serve(listener, app)
            .with_graceful_shutdown(async move { token.cancelled().await })
            .await;
        if let Err(e) = res {
            tracing::error!(error = %e, "stream server stopped");
        }
    });
    Ok(StreamServer {
        local_addr,
        hub,
        cancel,
        task,
    })
}
