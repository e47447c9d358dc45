use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use iccs_core::{Error, ErrorCode, Result};
use tokio::sync::oneshot;
use tower_http::services::ServeDir;

use crate::bridge::Gateway;

const PLACEHOLDER: &str = include_str!("../assets/index.html");

fn status_of(code: ErrorCode) -> StatusCode {
    match code {
        ErrorCode::NoSuchObject | ErrorCode::NoSuchMethod => StatusCode::NOT_FOUND,
        ErrorCode::BadArgs | ErrorCode::OutOfRange => StatusCode::BAD_REQUEST,
        ErrorCode::Reserved => StatusCode::CONFLICT,
        ErrorCode::Timeout => StatusCode::GATEWAY_TIMEOUT,
        ErrorCode::ConnectFailed | ErrorCode::CommFailure => StatusCode::BAD_GATEWAY,
        ErrorCode::AppError => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_response(e: Error) -> Response {
    (status_of(e.code), Json(e)).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Error::app(format!("worker failed: {e}")))?
}

async fn broadview(State(gw): State<Arc<Gateway>>) -> Response {
    match blocking(move || gw.broadview()).await {
        Ok(b) => Json(b).into_response(),
        Err(e) => error_response(e),
    }
}

async fn styles(State(gw): State<Arc<Gateway>>) -> Response {
    Json(gw.styles()).into_response()
}

async fn panel_list(State(gw): State<Arc<Gateway>>) -> Response {
    Json(gw.panels().type_tags().collect::<Vec<_>>()).into_response()
}

async fn panel(State(gw): State<Arc<Gateway>>, Path(type_tag): Path<String>) -> Response {
    match gw.panels().get(&type_tag) {
        Some(p) => Json(p.clone()).into_response(),
        None => error_response(Error::no_such_object(format!("no panel for type_tag {type_tag:?}"))),
    }
}

async fn ws(
    State(gw): State<Arc<Gateway>>,
    Query(q): Query<HashMap<String, String>>,
    upgrade: WebSocketUpgrade,
) -> Response {
    let Some(operator) = q.get("operator").filter(|o| !o.is_empty()).cloned() else {
        return error_response(Error::bad_args("operator query parameter required"));
    };
    upgrade.on_upgrade(move |socket| session(gw, operator, socket))
}

async fn session(gw: Arc<Gateway>, operator: String, socket: WebSocket) {
    let (id, mut rx) = gw.open_session(&operator);
    let (mut sink, mut stream) = socket.split();
    let mut writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            let Ok(text) = serde_json::to_string(&m) else { continue };
            if sink.send(Message::Text(text.into())).await.is_err() {
                return;
            }
        }
        // Session ended by the gateway (slow consumer or shutdown).
        let _ = sink.close().await;
    });
    loop {
        tokio::select! {
            msg = stream.next() => match msg {
                Some(Ok(Message::Text(t))) => {
                    let g = gw.clone();
                    let text = t.to_string();
                    // Requests of one session are handled in arrival order.
                    let _ = tokio::task::spawn_blocking(move || g.handle_text(id, &text)).await;
                }
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(_)) => {}
            },
            _ = &mut writer => break,
        }
    }
    writer.abort();
    let _ = tokio::task::spawn_blocking(move || gw.close_session(id)).await;
}

fn router(gw: Arc<Gateway>) -> Router {
    let api = Router::new()
        .route("/api/broadview", get(broadview))
        .route("/api/styles", get(styles))
        .route("/api/panels", get(panel_list))
        .route("/api/panels/{type_tag}", get(panel))
        .route("/ws", get(ws));
    let api = match gw.settings().static_dir.clone() {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api
            .route("/", get(|| async { Html(PLACEHOLDER) }))
            .route("/index.html", get(|| async { Html(PLACEHOLDER) })),
    };
    api.with_state(gw)
}

/// The gateway's HTTP listener, running on its own runtime thread.
pub struct HttpServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl HttpServer {
    /// Binds before returning, so the listener is open once this succeeds.
    pub fn start(gw: Arc<Gateway>, addr: &str) -> Result<HttpServer> {
        let listener =
            std::net::TcpListener::bind(addr).map_err(|e| Error::bad_args(format!("cannot bind {addr}: {e}")))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::app(e.to_string()))?;
        let local = listener.local_addr().map_err(|e| Error::app(e.to_string()))?;
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("gateway-http")
            .enable_all()
            .build()
            .map_err(|e| Error::app(e.to_string()))?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new()
            .name("gateway-http".into())
            .spawn(move || {
                rt.block_on(async move {
                    let listener = match tokio::net::TcpListener::from_std(listener) {
                        Ok(l) => l,
                        Err(e) => {
                            log::error!("gateway listener: {e}");
                            return;
                        }
                    };
                    tokio::select! {
                        r = axum::serve(listener, router(gw)) => {
                            if let Err(e) = r {
                                log::error!("gateway http: {e}");
                            }
                        }
                        _ = rx => {}
                    }
                });
                // Open sockets are dropped with the runtime.
                rt.shutdown_timeout(Duration::from_millis(200));
            })
            .map_err(|e| Error::app(e.to_string()))?;
        Ok(HttpServer {
            addr: local,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.halt();
    }
}
