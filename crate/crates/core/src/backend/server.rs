//! Loopback HTTP server exposing any [`FullBackend`], with scriptable fault
//! injection (delays and error statuses) for exercising client retries.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use super::{BackendEndpoint, BackendError, FullBackend, Role, REFRESH_PATH};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FaultKind {
    /// Hold the request this long before answering normally.
    Delay { ms: u64 },
    /// Answer with this HTTP status and no payload.
    Status { code: u16 },
}

/// Injects `kind` on the first `fail_times` matching requests. Requests are
/// counted per distinct body, so every matching request fails that many times
/// before it succeeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRule {
    /// Route path such as `/v1/score`; any route when absent.
    #[serde(default)]
    pub path: Option<String>,
    /// Substring of the raw request body; any body when absent.
    #[serde(default)]
    pub needle: Option<String>,
    pub fail_times: u32,
    pub kind: FaultKind,
}

#[derive(Debug, Default)]
struct Counters {
    per_path: HashMap<String, usize>,
    per_rule_body: HashMap<(usize, String), u32>,
    injected: usize,
}

struct Shared {
    backend: Arc<dyn FullBackend>,
    faults: Vec<FaultRule>,
    counters: Mutex<Counters>,
}

pub struct MockServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl MockServer {
    pub fn start(backend: Arc<dyn FullBackend>, faults: Vec<FaultRule>) -> std::io::Result<Self> {
        let shared = Arc::new(Shared {
            backend,
            faults,
            counters: Mutex::new(Counters::default()),
        });
        let app = Router::new()
            .route(Role::Score.path(), post(score))
            .route(Role::Generate.path(), post(generate))
            .route(Role::Translate.path(), post(translate))
            .route(Role::Embed.path(), post(embed))
            .route(REFRESH_PATH, post(refresh))
            .with_state(shared.clone());

        let (addr_tx, addr_rx) = std::sync::mpsc::channel();
        let (stop_tx, stop_rx) = oneshot::channel::<()>();
        std::thread::Builder::new().name("mock-backend".into()).spawn(move || {
            let rt = match tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
            {
                Ok(rt) => rt,
                Err(e) => {
                    let _ = addr_tx.send(Err(e));
                    return;
                }
            };
            rt.block_on(async move {
                let listener = match tokio::net::TcpListener::bind("127.0.0.1:0").await {
                    Ok(l) => l,
                    Err(e) => {
                        let _ = addr_tx.send(Err(e));
                        return;
                    }
                };
                let _ = addr_tx.send(listener.local_addr());
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await;
            });
        })?;
        let addr = addr_rx.recv().map_err(|e| std::io::Error::other(e.to_string()))??;
        Ok(Self {
            addr,
            shared,
            shutdown: Some(stop_tx),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn endpoint(&self, role: Role) -> BackendEndpoint {
        BackendEndpoint::new(self.url(), role)
    }

    /// Requests received on `path`, including ones that were failed on purpose.
    pub fn requests(&self, path: &str) -> usize {
        let c = self.shared.counters.lock().expect("counters");
        c.per_path.get(path).copied().unwrap_or(0)
    }

    pub fn injected_faults(&self) -> usize {
        self.shared.counters.lock().expect("counters").injected
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

impl Shared {
    fn record(&self, path: &str, body: &str) -> Option<FaultKind> {
        let mut c = self.counters.lock().expect("counters");
        *c.per_path.entry(path.to_string()).or_insert(0) += 1;
        for (i, rule) in self.faults.iter().enumerate() {
            if rule.path.as_deref().is_some_and(|p| p != path) {
                continue;
            }
            if rule.needle.as_deref().is_some_and(|n| !body.contains(n)) {
                continue;
            }
            let seen = c.per_rule_body.entry((i, body.to_string())).or_insert(0);
            if *seen < rule.fail_times {
                *seen += 1;
                c.injected += 1;
                return Some(rule.kind.clone());
            }
        }
        None
    }
}

async fn handle<Req, Resp>(
    shared: Arc<Shared>,
    path: &'static str,
    body: Bytes,
    call: fn(&dyn FullBackend, &Req) -> Result<Resp, BackendError>,
) -> Response
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
{
    let text = String::from_utf8_lossy(&body).into_owned();
    match shared.record(path, &text) {
        Some(FaultKind::Status { code }) => {
            let code = StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            return (code, "injected fault").into_response();
        }
        Some(FaultKind::Delay { ms }) => tokio::time::sleep(Duration::from_millis(ms)).await,
        None => {}
    }
    let req: Req = match serde_json::from_str(&text) {
        Ok(r) => r,
        Err(e) => return (StatusCode::UNPROCESSABLE_ENTITY, e.to_string()).into_response(),
    };
    let result = tokio::task::spawn_blocking(move || call(shared.backend.as_ref(), &req)).await;
    match result {
        Ok(Ok(resp)) => match serde_json::to_vec(&resp) {
            Ok(bytes) => ([("content-type", "application/json")], bytes).into_response(),
            Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        },
        Ok(Err(e)) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn score(State(s): State<Arc<Shared>>, body: Bytes) -> Response {
    handle(s, Role::Score.path(), body, |b, r| b.score(r)).await
}

async fn generate(State(s): State<Arc<Shared>>, body: Bytes) -> Response {
    handle(s, Role::Generate.path(), body, |b, r| b.generate(r)).await
}

async fn translate(State(s): State<Arc<Shared>>, body: Bytes) -> Response {
    handle(s, Role::Translate.path(), body, |b, r| b.translate(r)).await
}

async fn embed(State(s): State<Arc<Shared>>, body: Bytes) -> Response {
    handle(s, Role::Embed.path(), body, |b, r| b.embed(r)).await
}

async fn refresh(State(s): State<Arc<Shared>>, body: Bytes) -> Response {
    handle(s, REFRESH_PATH, body, |b, r| b.refresh(r)).await
}
