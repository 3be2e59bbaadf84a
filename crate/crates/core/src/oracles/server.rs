//! Loopback HTTP server speaking the inference protocol for an [`OracleSpec`].
//!
//! Besides `/capabilities` and `/predict` it serves `GET /calls` with the
//! call counters used by resumability checks. A failure budget can be set to
//! make `/predict` answer 503 after a number of successful calls.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response, Server};

use super::{OracleSpec, Rejection};
use crate::protocol::{canonical_hash, PredictRequest};

const WORKERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallStats {
    /// Successful `/predict` answers.
    pub calls: u64,
    /// Requests refused with 4xx.
    pub rejected: u64,
    /// Requests failed on purpose with 503.
    pub failed: u64,
    /// Highest number of successful answers for a single request digest.
    pub max_per_request: u64,
}

struct State {
    spec: OracleSpec,
    calls: AtomicU64,
    rejected: AtomicU64,
    failed: AtomicU64,
    per_request: Mutex<HashMap<String, u64>>,
    fail_after: Mutex<Option<u64>>,
}

impl State {
    fn stats(&self) -> CallStats {
        CallStats {
            calls: self.calls.load(Ordering::SeqCst),
            rejected: self.rejected.load(Ordering::SeqCst),
            failed: self.failed.load(Ordering::SeqCst),
            max_per_request: self.per_request.lock().unwrap().values().copied().max().unwrap_or(0),
        }
    }
}

pub struct MockServer {
    addr: SocketAddr,
    server: Arc<Server>,
    state: Arc<State>,
    workers: Vec<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(spec: OracleSpec, addr: &str) -> std::io::Result<MockServer> {
        let server = Server::http(addr).map_err(|e| std::io::Error::new(std::io::ErrorKind::AddrInUse, e.to_string()))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let state = Arc::new(State {
            spec,
            calls: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            failed: AtomicU64::new(0),
            per_request: Mutex::new(HashMap::new()),
            fail_after: Mutex::new(None),
        });
        let workers = (0..WORKERS)
            .map(|_| {
                let server = Arc::clone(&server);
                let state = Arc::clone(&state);
                thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handle(&state, req);
                    }
                })
            })
            .collect();
        Ok(MockServer {
            addr,
            server,
            state,
            workers,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stats(&self) -> CallStats {
        self.state.stats()
    }

    /// After `n` successful calls (counted from server start), `/predict`
    /// answers 503. `None` lifts the limit.
    pub fn set_fail_after(&self, n: Option<u64>) {
        *self.state.fail_after.lock().unwrap() = n;
    }

    /// Blocks the calling thread for as long as the server runs.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn json_header() -> Header {
    Header::from_bytes("Content-Type", "application/json").expect("static header")
}

fn reply(req: Request, status: u16, body: String) {
    let resp = Response::from_string(body)
        .with_status_code(status)
        .with_header(json_header());
    let _ = req.respond(resp);
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

fn handle(state: &State, mut req: Request) {
    let path = req.url().split('?').next().unwrap_or("").to_string();
    match (req.method(), path.as_str()) {
        (Method::Get, "/capabilities") => {
            let body = serde_json::to_string(&state.spec.capabilities).expect("caps serialize");
            reply(req, 200, body);
        }
        (Method::Get, "/calls") => {
            let body = serde_json::to_string(&state.stats()).expect("stats serialize");
            reply(req, 200, body);
        }
        (Method::Post, "/predict") => {
            let mut body = String::new();
            if req.as_reader().read_to_string(&mut body).is_err() {
                state.rejected.fetch_add(1, Ordering::SeqCst);
                return reply(req, 400, error_body("unreadable body"));
            }
            let parsed: PredictRequest = match serde_json::from_str(&body) {
                Ok(p) => p,
                Err(e) => {
                    state.rejected.fetch_add(1, Ordering::SeqCst);
                    return reply(req, 400, error_body(&format!("malformed request: {e}")));
                }
            };
            // the budget check and the counter bump happen under one lock so
            // concurrent workers cannot overshoot it
            let fail_after = state.fail_after.lock().unwrap();
            if let Some(limit) = *fail_after {
                if state.calls.load(Ordering::SeqCst) >= limit {
                    drop(fail_after);
                    state.failed.fetch_add(1, Ordering::SeqCst);
                    return reply(req, 503, error_body("injected failure"));
                }
            }
            match state.spec.respond(&parsed) {
                Ok(resp) => {
                    state.calls.fetch_add(1, Ordering::SeqCst);
                    if let Ok(d) = canonical_hash(&parsed) {
                        *state.per_request.lock().unwrap().entry(d).or_insert(0) += 1;
                    }
                    drop(fail_after);
                    reply(req, 200, serde_json::to_string(&resp).expect("response serializes"));
                }
                Err(e) => {
                    drop(fail_after);
                    state.rejected.fetch_add(1, Ordering::SeqCst);
                    let status = match e {
                        Rejection::Capability(_) => 422,
                        Rejection::Invalid(_) => 400,
                    };
                    reply(req, status, error_body(&e.to_string()));
                }
            }
        }
        _ => reply(req, 404, error_body("not found")),
    }
}

/// Reads `/calls` from a running mock.
pub fn fetch_stats(base_url: &str) -> Result<CallStats, String> {
    let body = ureq::get(&format!("{}/calls", base_url.trim_end_matches('/')))
        .call()
        .map_err(|e| e.to_string())?
        .into_string()
        .map_err(|e| e.to_string())?;
    serde_json::from_str(&body).map_err(|e| e.to_string())
}
