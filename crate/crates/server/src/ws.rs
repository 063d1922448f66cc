//! WebSocket endpoints: the collaboration event channel and the worker
//! channel.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::Response;
use futures::{SinkExt, StreamExt};
use geoloop_core::ids::ProjectId;
use geoloop_core::protocol::{decode_ndjson, encode_ndjson, ServerMessage, WorkerMessage};
use serde_json::json;
use tokio::sync::mpsc;

use crate::app::App;
use crate::bus::delivered;
use crate::error::{ServiceError, ServiceResult};
use crate::records::project_topic;

/// `/ws?project=ID` or `/ws?topic=NAME`. Without `after=SEQ` delivery starts
/// at the current head; `after=0` replays the whole topic. The first frame is `{"type":"subscribed",...}`; every
/// following frame is one event carrying `topic` and `seq`.
pub async fn client(
    State(app): State<Arc<App>>,
    Query(q): Query<HashMap<String, String>>,
    ws: WebSocketUpgrade,
) -> ServiceResult<Response> {
    let topic = match (q.get("project"), q.get("topic")) {
        (Some(p), None) => {
            let id: ProjectId = p.parse().map_err(|_| ServiceError::not_found("project", p))?;
            if !app.project_exists(id) {
                return Err(ServiceError::not_found("project", id));
            }
            project_topic(id)
        }
        (None, Some(t)) if !t.is_empty() => t.clone(),
        _ => return Err(ServiceError::invalid("exactly one of project or topic is required")),
    };
    let after: Option<u64> = match q.get("after").filter(|a| !a.is_empty()) {
        Some(a) => Some(a.parse().map_err(|_| ServiceError::invalid("after must be a sequence number"))?),
        None => None,
    };
    if after.is_some_and(|a| a > 0) && !app.store.topic_exists(&topic) {
        return Err(ServiceError::ConflictCode {
            code: "unknown_topic",
            message: format!("cannot resume unknown topic {topic:?}"),
        });
    }
    Ok(ws.on_upgrade(move |socket| client_loop(app, socket, topic, after)))
}

async fn client_loop(app: Arc<App>, socket: WebSocket, topic: String, after: Option<u64>) {
    let (mut tx, mut rx) = socket.split();
    let after = after.unwrap_or_else(|| app.store.topic_head(&topic));
    let mut sub = app.bus.subscribe(app.store.clone(), &topic, after);
    let hello = json!({ "type": "subscribed", "topic": topic, "after": after, "head": app.store.topic_head(&topic) });
    if tx.send(Message::Text(hello.to_string().into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            ev = sub.next() => {
                let Some((seq, body)) = ev else { break };
                let frame = delivered(&topic, seq, &body).to_string();
                if tx.send(Message::Text(frame.into())).await.is_err() {
                    break;
                }
            }
            msg = rx.next() => match msg {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}

/// `/ws/worker`: the first message must be `register`. Frames carry NDJSON.
pub async fn worker(State(app): State<Arc<App>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| worker_loop(app, socket))
}

async fn worker_loop(app: Arc<App>, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut outbox) = mpsc::unbounded_channel::<ServerMessage>();
    let writer = tokio::spawn(async move {
        while let Some(m) = outbox.recv().await {
            let close = matches!(m, ServerMessage::Error { .. });
            if sink.send(Message::Text(encode_ndjson(&[m]).into())).await.is_err() {
                break;
            }
            if close {
                let _ = sink.send(Message::Close(None)).await;
                break;
            }
        }
    });
    let mut session: Option<(String, u64)> = None;
    'read: while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            _ => continue,
        };
        let messages: Vec<WorkerMessage> = match decode_ndjson(&text) {
            Ok(m) => m,
            Err(e) => {
                let _ = tx.send(ServerMessage::Error {
                    message: format!("malformed message: {e}"),
                });
                break;
            }
        };
        for m in messages {
            match (&session, m) {
                (None, WorkerMessage::Register { worker_id, capabilities }) => {
                    if worker_id.trim().is_empty() || capabilities.is_empty() {
                        let _ = tx.send(ServerMessage::Error {
                            message: "register needs a worker_id and at least one capability".into(),
                        });
                        break 'read;
                    }
                    let orch = app.orch.clone();
                    let (id, caps, t) = (worker_id.clone(), capabilities, tx.clone());
                    let conn = tokio::task::spawn_blocking(move || orch.register(&id, caps, t)).await;
                    match conn {
                        Ok(conn) => session = Some((worker_id, conn)),
                        Err(_) => break 'read,
                    }
                }
                (None, _) => {
                    let _ = tx.send(ServerMessage::Error {
                        message: "the first message must be register".into(),
                    });
                    break 'read;
                }
                (Some((id, conn)), m) => {
                    let orch = app.orch.clone();
                    let (id, conn) = (id.clone(), *conn);
                    let out = tokio::task::spawn_blocking(move || orch.handle(&id, conn, m)).await;
                    match out {
                        Ok(Ok(())) => {}
                        Ok(Err(ServiceError::Conflict(message))) => {
                            // The session was superseded or swept.
                            let _ = tx.send(ServerMessage::Error { message });
                            break 'read;
                        }
                        Ok(Err(e)) => {
                            tracing::warn!(error = %e, "worker message rejected");
                        }
                        Err(_) => break 'read,
                    }
                }
            }
        }
    }
    if let Some((id, conn)) = session {
        app.orch.disconnected(&id, conn);
    }
    drop(tx);
    // The session may still hold a sender until it is swept; give queued
    // frames a moment to flush, then stop writing.
    let mut writer = writer;
    if tokio::time::timeout(std::time::Duration::from_millis(200), &mut writer).await.is_err() {
        writer.abort();
    }
}
