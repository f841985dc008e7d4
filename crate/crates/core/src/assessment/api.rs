//! HTTP JSON API for rating sessions.
//!
//! ```text
//! GET  /session/{id}[?rater_id=R]      blind sample list + anchor panels
//! POST /session/{id}/vote               {"sample_id", "rater_id", "choice": "style_a"|"style_b"|"none"}
//! GET  /session/{id}/aggregate[?partial=true]
//! ```

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{AssessError, AssessmentSession, PanelChoice};

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(body: Value) -> Self {
        Self { status: 200, body }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        Self { status, body: json!({"error": message.into()}) }
    }
}

struct Slot {
    session: AssessmentSession,
    path: Option<PathBuf>,
}

/// Sessions by id. Ballots go through the write lock one at a time and are
/// persisted before the vote is acknowledged; reads share the lock.
#[derive(Default)]
pub struct AssessmentService {
    sessions: RwLock<HashMap<String, Slot>>,
}

#[derive(Deserialize)]
struct VoteBody {
    sample_id: String,
    rater_id: String,
    choice: PanelChoice,
}

fn query_param<'a>(query: &'a str, key: &str) -> Option<&'a str> {
    query.split('&').filter_map(|kv| kv.split_once('=')).find(|(k, _)| *k == key).map(|(_, v)| v)
}

fn assess_status(e: &AssessError) -> u16 {
    match e {
        AssessError::UnknownSample(_) => 404,
        AssessError::SessionClosed | AssessError::IncompleteBallots { .. } | AssessError::NoBallots => 409,
        AssessError::EmptyRater => 400,
        _ => 500,
    }
}

impl AssessmentService {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a session; when `path` is given every ballot is written there.
    pub fn insert(&self, session: AssessmentSession, path: Option<PathBuf>) {
        let mut map = self.sessions.write().unwrap_or_else(|e| e.into_inner());
        map.insert(session.session_id.clone(), Slot { session, path });
    }

    pub fn snapshot(&self, session_id: &str) -> Option<AssessmentSession> {
        let map = self.sessions.read().unwrap_or_else(|e| e.into_inner());
        map.get(session_id).map(|s| s.session.clone())
    }

    /// The payload raters see. Contains no field tied to sample provenance.
    pub fn blind_view(session: &AssessmentSession, rater_id: Option<&str>) -> Value {
        let texts = |pool: &[super::PoolItem]| pool.iter().map(|p| p.text.clone()).collect::<Vec<_>>();
        let (a, b) = if session.llm_is_style_a {
            (texts(&session.llm_anchors), texts(&session.dataset_anchors))
        } else {
            (texts(&session.dataset_anchors), texts(&session.llm_anchors))
        };
        let samples: Vec<Value> =
            session.ordered_samples().map(|s| json!({"sample_id": s.sample_id, "text": s.text})).collect();
        let mut view = json!({
            "session_id": session.session_id,
            "panels": [
                {"label": "Style A", "samples": a},
                {"label": "Style B", "samples": b},
            ],
            "choices": ["style_a", "style_b", "none"],
            "samples": samples,
            "total": session.eval_samples.len(),
            "closed": session.closed,
        });
        if let Some(rater) = rater_id {
            let voted: Vec<&str> = session
                .ordered_samples()
                .filter(|s| session.ballots.get(rater).is_some_and(|b| b.contains_key(&s.sample_id)))
                .map(|s| s.sample_id.as_str())
                .collect();
            view["voted"] = json!(voted);
        }
        view
    }

    pub fn handle(&self, method: &str, url: &str, body: &[u8]) -> ApiResponse {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
        match (method, segments.as_slice()) {
            ("GET", ["session", id]) => match self.snapshot(id) {
                Some(s) => ApiResponse::ok(Self::blind_view(&s, query_param(query, "rater_id"))),
                None => ApiResponse::error(404, format!("unknown session `{id}`")),
            },
            ("POST", ["session", id, "vote"]) => self.vote(id, body),
            ("GET", ["session", id, "aggregate"]) => {
                let partial = matches!(query_param(query, "partial"), Some("true" | "1"));
                match self.snapshot(id) {
                    None => ApiResponse::error(404, format!("unknown session `{id}`")),
                    Some(s) => match s.aggregate(partial) {
                        Ok(agg) => ApiResponse::ok(serde_json::to_value(agg).expect("aggregate serializes")),
                        Err(e) => ApiResponse::error(assess_status(&e), e.to_string()),
                    },
                }
            }
            _ => ApiResponse::error(404, format!("no route for {method} {path}")),
        }
    }

    fn vote(&self, id: &str, body: &[u8]) -> ApiResponse {
        let vote: VoteBody = match serde_json::from_slice(body) {
            Ok(v) => v,
            Err(e) => return ApiResponse::error(400, format!("bad vote body: {e}")),
        };
        let mut map = self.sessions.write().unwrap_or_else(|e| e.into_inner());
        let Some(slot) = map.get_mut(id) else {
            return ApiResponse::error(404, format!("unknown session `{id}`"));
        };
        let option = slot.session.panel_to_option(vote.choice);
        let mut updated = slot.session.clone();
        let receipt = match updated.record_vote(&vote.sample_id, &vote.rater_id, option) {
            Ok(r) => r,
            Err(e) => return ApiResponse::error(assess_status(&e), e.to_string()),
        };
        if let Some(path) = &slot.path {
            if let Err(e) = updated.save(path) {
                return ApiResponse::error(500, e.to_string());
            }
        }
        slot.session = updated;
        ApiResponse::ok(json!({"ok": true, "overwrote": receipt.overwrote, "ballot_count": receipt.ballot_count}))
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Serves the API on `addr` (port 0 picks a free port) with a few worker
/// threads.
pub fn serve(service: Arc<AssessmentService>, addr: &str) -> std::io::Result<ServerHandle> {
    let server = Arc::new(tiny_http::Server::http(addr).map_err(std::io::Error::other)?);
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
    let workers = (0..4)
        .map(|_| {
            let server = server.clone();
            let service = service.clone();
            std::thread::spawn(move || {
                while let Ok(mut req) = server.recv() {
                    let mut body = Vec::new();
                    let resp = match req.as_reader().read_to_end(&mut body) {
                        Ok(_) => service.handle(req.method().as_str(), req.url(), &body),
                        Err(e) => ApiResponse::error(400, e.to_string()),
                    };
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                    let _ = req.respond(
                        tiny_http::Response::from_string(resp.body.to_string())
                            .with_status_code(resp.status)
                            .with_header(header),
                    );
                }
            })
        })
        .collect();
    Ok(ServerHandle { addr, server, workers })
}
