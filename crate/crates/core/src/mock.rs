//! Local stand-in for the chat-completions, file and fine-tuning endpoints.
//!
//! Chat requests are answered by a synthetic subject (or a fixed string),
//! optionally preceded by scripted failures, so the remote client can be
//! exercised end to end without leaving the machine.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use crate::backend::synthetic_complete;
use crate::error::{Error, Result};
use crate::model::ContextSet;
use crate::prompts::{PromptBundle, TaskKind, DECISION_TASK, INTROSPECTION_TASK};
use crate::seed::Seed;
use crate::subject::SubjectConfig;

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum MockResponder {
    /// Answers as `base`, or as `trained` when the requested model came out
    /// of an introspection fine-tuning job and a trained subject is set.
    Synthetic {
        base: SubjectConfig,
        trained: Option<SubjectConfig>,
        contexts: ContextSet,
        seed: Seed,
    },
    Fixed(String),
}

/// Scripted failures for chat requests, counted in arrival order.
#[derive(Debug, Clone, Default)]
pub struct FailureScript {
    /// Statuses returned to the first chat requests, one each.
    pub leading: Vec<u16>,
    /// `(n, status)`: every n-th chat request after the leading ones fails.
    pub every_nth: Option<(u64, u16)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub body: String,
    pub authorization: Option<String>,
    pub status: u16,
}

struct State {
    responder: MockResponder,
    failures: FailureScript,
    chat_count: AtomicU64,
    next_id: AtomicU64,
    log: Mutex<Vec<RecordedRequest>>,
    jobs: Mutex<HashMap<String, (Value, u32)>>,
    file_kinds: Mutex<HashMap<String, &'static str>>,
}

pub struct MockServer {
    server: Arc<Server>,
    state: Arc<State>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
    port: u16,
}

impl MockServer {
    pub fn start(responder: MockResponder, failures: FailureScript) -> Result<Self> {
        let server = Server::http("127.0.0.1:0")
            .map_err(|e| Error::Transport(format!("starting mock server: {e}")))?;
        let port = server
            .server_addr()
            .to_ip()
            .map(|a| a.port())
            .ok_or_else(|| Error::Transport("mock server has no IP address".into()))?;
        let server = Arc::new(server);
        let state = Arc::new(State {
            responder,
            failures,
            chat_count: AtomicU64::new(0),
            next_id: AtomicU64::new(1),
            log: Mutex::new(Vec::new()),
            jobs: Mutex::new(HashMap::new()),
            file_kinds: Mutex::new(HashMap::new()),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..8)
            .map(|_| {
                let (server, state, stop) = (server.clone(), state.clone(), stop.clone());
                std::thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match server.recv_timeout(Duration::from_millis(25)) {
                            Ok(Some(request)) => handle(&state, request),
                            Ok(None) => {}
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(MockServer {
            server,
            state,
            stop,
            workers,
            port,
        })
    }

    /// Base URL to put in a backend spec, including the `/v1` prefix.
    pub fn endpoint(&self) -> String {
        format!("http://127.0.0.1:{}/v1", self.port)
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.state.log.lock().expect("log lock").clone()
    }

    pub fn chat_requests(&self) -> u64 {
        self.state.chat_count.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.server.unblock();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn handle(state: &State, mut request: tiny_http::Request) {
    let mut body = String::new();
    let _ = request.as_reader().read_to_string(&mut body);
    let method = request.method().clone();
    let path = request.url().to_string();
    let authorization = request
        .headers()
        .iter()
        .find(|h| h.field.equiv("Authorization"))
        .map(|h| h.value.as_str().to_string());
    let (status, reply) = route(state, &method, &path, &body);
    state.log.lock().expect("log lock").push(RecordedRequest {
        method: method.as_str().to_string(),
        path,
        body,
        authorization,
        status,
    });
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = request.respond(
        Response::from_string(reply.to_string())
            .with_status_code(status)
            .with_header(header),
    );
}

fn error_body(message: &str) -> Value {
    json!({"error": {"message": message}})
}

fn route(state: &State, method: &Method, path: &str, body: &str) -> (u16, Value) {
    match (method, path) {
        (Method::Post, "/v1/chat/completions") => chat(state, body),
        (Method::Post, "/v1/files") => {
            if !body.contains("fine-tune") {
                return (400, error_body("purpose must be fine-tune"));
            }
            let id = format!("file-{}", state.next_id.fetch_add(1, Ordering::SeqCst));
            let kind = if body.contains("[INTROSPECTION TASK]") {
                "introspection"
            } else {
                "preference"
            };
            state.file_kinds.lock().expect("files lock").insert(id.clone(), kind);
            (200, json!({"id": id, "object": "file", "purpose": "fine-tune", "bytes": body.len()}))
        }
        (Method::Post, "/v1/fine_tuning/jobs") => {
            let Ok(request) = serde_json::from_str::<Value>(body) else {
                return (400, error_body("body is not JSON"));
            };
            let file = request["training_file"].as_str().unwrap_or_default();
            let Some(kind) = state.file_kinds.lock().expect("files lock").get(file).copied() else {
                return (400, error_body("unknown training_file"));
            };
            let id = format!("ftjob-{}", state.next_id.fetch_add(1, Ordering::SeqCst));
            let job = json!({
                "suffix": kind,
                "id": id,
                "object": "fine_tuning.job",
                "status": "queued",
                "model": request["model"],
                "training_file": request["training_file"],
                "hyperparameters": request["hyperparameters"],
                "fine_tuned_model": null,
            });
            state.jobs.lock().expect("jobs lock").insert(id, (job.clone(), 0));
            (200, job)
        }
        (Method::Get, p) if p.starts_with("/v1/fine_tuning/jobs/") => {
            let id = &p["/v1/fine_tuning/jobs/".len()..];
            let mut jobs = state.jobs.lock().expect("jobs lock");
            let Some((job, polls)) = jobs.get_mut(id) else {
                return (404, error_body("no such job"));
            };
            *polls += 1;
            if *polls == 1 {
                job["status"] = json!("running");
            } else {
                job["status"] = json!("succeeded");
                let model = job["model"].as_str().unwrap_or("model").to_string();
                let kind = job["suffix"].as_str().unwrap_or("preference").to_string();
                job["fine_tuned_model"] = json!(format!("ft:{model}:{kind}:{id}"));
            }
            (200, job.clone())
        }
        _ => (404, error_body("unknown route")),
    }
}

fn scripted_failure(state: &State, n: u64) -> Option<u16> {
    let lead = &state.failures.leading;
    if let Some(status) = lead.get(n as usize) {
        return Some(*status);
    }
    let (every, status) = state.failures.every_nth?;
    let after = n + 1 - lead.len() as u64;
    (every > 0 && after.is_multiple_of(every)).then_some(status)
}

fn chat(state: &State, body: &str) -> (u16, Value) {
    let n = state.chat_count.fetch_add(1, Ordering::SeqCst);
    if let Some(status) = scripted_failure(state, n) {
        return (status, error_body("scripted failure"));
    }
    let Ok(request) = serde_json::from_str::<Value>(body) else {
        return (400, error_body("body is not JSON"));
    };
    let model = request["model"].as_str().unwrap_or_default();
    let messages = request["messages"].as_array().cloned().unwrap_or_default();
    let content = |role: &str| {
        messages
            .iter()
            .find(|m| m["role"] == role)
            .and_then(|m| m["content"].as_str())
            .unwrap_or_default()
            .to_string()
    };
    if request["temperature"] != json!(0) {
        return (400, error_body("temperature must be 0"));
    }
    let text = match &state.responder {
        MockResponder::Fixed(text) => text.clone(),
        MockResponder::Synthetic {
            base,
            trained,
            contexts,
            seed,
        } => {
            let user = content("user");
            let task_kind = if user.starts_with(DECISION_TASK) {
                TaskKind::Decision
            } else if user.starts_with(INTROSPECTION_TASK) {
                TaskKind::Introspection
            } else {
                return (400, error_body("unrecognized task"));
            };
            let subject = match trained {
                Some(t) if model.starts_with("ft:") && model.contains(":introspection:") => t,
                _ => base,
            };
            let prompt = PromptBundle {
                system_text: content("system"),
                user_text: user,
                task_kind,
                context_id: String::new(),
                pair_id: 0,
            };
            // keyed by content, so retries and reordering give the same answer
            let call_seed = seed.derive(task_kind.as_str(), &prompt.user_text, 0);
            match synthetic_complete(subject, contexts, &prompt, call_seed) {
                Ok(text) => text,
                Err(e) => return (400, error_body(&e.to_string())),
            }
        }
    };
    (
        200,
        json!({
            "id": format!("chatcmpl-{n}"),
            "object": "chat.completion",
            "model": model,
            "choices": [{
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }],
        }),
    )
}
