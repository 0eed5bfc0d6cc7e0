//! Client for an OpenAI-compatible chat-completions endpoint and its
//! file-upload and fine-tuning job endpoints.
//!
//! The credential is read from the environment variable named in the
//! [`BackendSpec`] and only ever placed in the `Authorization` header.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{max_tokens, BackendKind, BackendSpec, Completer, CompletionResult, TransportStatus};
use crate::dataset::{read_jsonl, DatasetKind};
use crate::error::{Error, Result};
use crate::prompts::PromptBundle;

/// Setting this to anything but `""` or `"0"` forbids traffic to
/// non-loopback hosts.
pub const NO_NETWORK_VAR: &str = "NO_NETWORK";

const MAX_BACKOFF_MS: u64 = 60_000;

pub fn network_disabled() -> bool {
    matches!(std::env::var(NO_NETWORK_VAR), Ok(v) if !v.is_empty() && v != "0")
}

/// Host part of an `http(s)://host[:port]/...` URL.
pub fn endpoint_host(url: &str) -> Option<&str> {
    let rest = url
        .strip_prefix("http://")
        .or_else(|| url.strip_prefix("https://"))?;
    let authority = rest.split('/').next()?;
    let authority = authority.rsplit('@').next()?;
    if let Some(v6) = authority.strip_prefix('[') {
        return v6.split(']').next();
    }
    authority.split(':').next().filter(|h| !h.is_empty())
}

pub fn is_loopback(url: &str) -> bool {
    match endpoint_host(url) {
        Some(host) => {
            host.eq_ignore_ascii_case("localhost")
                || host
                    .parse::<std::net::IpAddr>()
                    .map(|ip| ip.is_loopback())
                    .unwrap_or(false)
        }
        None => false,
    }
}

enum Attempt {
    Done(u16, String),
    Retry(String),
    Fatal(String),
}

/// Outcome of one logical request after retries.
struct Exchange {
    status: Option<u16>,
    body: String,
    attempts: u32,
    diagnostic: Option<String>,
}

impl Exchange {
    fn ok(&self) -> bool {
        matches!(self.status, Some(s) if (200..300).contains(&s))
    }
}

/// Hyperparameters sent with a fine-tuning job.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHyperparameters {
    pub n_epochs: u32,
    pub batch_size: u32,
    pub learning_rate_multiplier: f64,
}

impl FinetuneHyperparameters {
    /// Three epochs throughout; batch size 10 for preference data and 1 for
    /// introspection data; learning-rate multiplier 1.8 for the mini model
    /// family and 2 otherwise.
    pub fn defaults(kind: DatasetKind, model_id: &str) -> Self {
        FinetuneHyperparameters {
            n_epochs: 3,
            batch_size: match kind {
                DatasetKind::Preference => 10,
                DatasetKind::Introspection => 1,
            },
            learning_rate_multiplier: if model_id.contains("mini") { 1.8 } else { 2.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneJob {
    pub id: String,
    pub status: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub training_file: String,
    #[serde(default)]
    pub fine_tuned_model: Option<String>,
    #[serde(default)]
    pub error: Option<Value>,
}

impl FinetuneJob {
    pub fn is_terminal(&self) -> bool {
        matches!(self.status.as_str(), "succeeded" | "failed" | "cancelled")
    }
}

pub struct RemoteBackend {
    spec: BackendSpec,
    agent: ureq::Agent,
    credential: Option<String>,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("model_id", &self.spec.model_id)
            .field("endpoint_url", &self.spec.endpoint_url)
            .field("credential", &self.credential.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl RemoteBackend {
    /// Builds a client from the spec. A missing credential is only tolerated
    /// for loopback endpoints (local mock servers).
    pub fn new(spec: BackendSpec) -> Result<Self> {
        spec.validate()?;
        if spec.kind != BackendKind::Remote {
            return Err(Error::config("remote client needs a backend of kind \"remote\""));
        }
        if endpoint_host(&spec.endpoint_url).is_none() {
            return Err(Error::config(format!(
                "endpoint_url {:?} is not an http(s) URL",
                spec.endpoint_url
            )));
        }
        let loopback = is_loopback(&spec.endpoint_url);
        if network_disabled() && !loopback {
            return Err(Error::config(format!(
                "{NO_NETWORK_VAR} is set; refusing to contact {}",
                spec.endpoint_url
            )));
        }
        let credential = std::env::var(&spec.credential_env_var_name)
            .ok()
            .filter(|k| !k.is_empty());
        if credential.is_none() && !loopback {
            return Err(Error::config(format!(
                "environment variable {} holds no credential",
                spec.credential_env_var_name
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(spec.request_timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteBackend {
            spec,
            agent,
            credential,
        })
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    /// Same endpoint and settings, different model (for example a
    /// fine-tuned one).
    pub fn with_model(&self, model_id: impl Into<String>) -> Self {
        let mut spec = self.spec.clone();
        spec.model_id = model_id.into();
        RemoteBackend {
            spec,
            agent: self.agent.clone(),
            credential: self.credential.clone(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.spec.endpoint_url.trim_end_matches('/'), path)
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(self.spec.backoff_base_ms.saturating_mul(factor).min(MAX_BACKOFF_MS))
    }

    fn once(&self, method: &str, url: &str, body: Option<(&str, Vec<u8>)>) -> Attempt {
        let outcome = match (method, body) {
            ("GET", _) => {
                let mut req = self.agent.get(url);
                if let Some(key) = &self.credential {
                    req = req.header("Authorization", format!("Bearer {key}"));
                }
                req.call()
            }
            (_, body) => {
                let (content_type, bytes) = body.unwrap_or(("application/json", b"{}".to_vec()));
                let mut req = self.agent.post(url).header("Content-Type", content_type);
                if let Some(key) = &self.credential {
                    req = req.header("Authorization", format!("Bearer {key}"));
                }
                req.send(&bytes[..])
            }
        };
        match outcome {
            Ok(response) => {
                let status = response.status().as_u16();
                let text = match response.into_body().read_to_string() {
                    Ok(t) => t,
                    Err(e) => return Attempt::Retry(format!("reading response body: {e}")),
                };
                if status == 429 || status >= 500 {
                    Attempt::Retry(format!("HTTP {status}: {}", snippet(&text)))
                } else {
                    Attempt::Done(status, text)
                }
            }
            Err(e) => match e {
                ureq::Error::BadUri(_) | ureq::Error::InvalidProxyUrl => Attempt::Fatal(e.to_string()),
                other => Attempt::Retry(format!("transport: {other}")),
            },
        }
    }

    /// One logical request with bounded retries: 429, 5xx, timeouts and
    /// connection errors are retried with doubling backoff, other statuses
    /// are returned as they are.
    fn exchange(&self, method: &str, path: &str, body: Option<(&str, Vec<u8>)>) -> Exchange {
        let url = self.url(path);
        let mut last = String::new();
        let limit = self.spec.max_retries + 1;
        for attempt in 1..=limit {
            match self.once(method, &url, body.clone()) {
                Attempt::Done(status, text) => {
                    let diagnostic = (!(200..300).contains(&status))
                        .then(|| format!("HTTP {status}: {}", snippet(&text)));
                    return Exchange {
                        status: Some(status),
                        body: text,
                        attempts: attempt,
                        diagnostic,
                    };
                }
                Attempt::Fatal(msg) => {
                    return Exchange {
                        status: None,
                        body: String::new(),
                        attempts: attempt,
                        diagnostic: Some(msg),
                    }
                }
                Attempt::Retry(msg) => {
                    log::debug!("{method} {path} attempt {attempt} failed: {msg}");
                    last = msg;
                    if attempt < limit {
                        std::thread::sleep(self.backoff(attempt - 1));
                    }
                }
            }
        }
        Exchange {
            status: None,
            body: String::new(),
            attempts: limit,
            diagnostic: Some(format!("gave up after {limit} attempts; last error: {last}")),
        }
    }

    fn json_call(&self, method: &str, path: &str, body: Option<&Value>, what: &str) -> Result<Value> {
        let payload = body.map(|b| ("application/json", b.to_string().into_bytes()));
        let ex = self.exchange(method, path, payload);
        if !ex.ok() {
            return Err(Error::Transport(format!(
                "{what}: {}",
                ex.diagnostic.unwrap_or_else(|| "request failed".into())
            )));
        }
        serde_json::from_str(&ex.body)
            .map_err(|e| Error::Transport(format!("{what}: response is not JSON: {e}")))
    }

    pub fn chat_request_body(&self, prompt: &PromptBundle) -> Value {
        json!({
            "model": self.spec.model_id,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_text},
            ],
            "temperature": 0,
            "max_tokens": max_tokens(prompt.task_kind),
        })
    }

    /// Uploads a dataset and starts a fine-tuning job on it. The file is
    /// validated locally first; nothing is sent if any line is malformed or
    /// the file mixes record kinds.
    pub fn submit_finetune(
        &self,
        dataset_path: &Path,
        hyperparameters: Option<FinetuneHyperparameters>,
    ) -> Result<FinetuneJob> {
        let records = read_jsonl(dataset_path)?;
        let kind = dataset_kind(dataset_path, &records)?;
        let hyper = hyperparameters
            .unwrap_or_else(|| FinetuneHyperparameters::defaults(kind, &self.spec.model_id));
        let bytes = std::fs::read(dataset_path)?;
        let file_name = dataset_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("dataset.jsonl");
        let (content_type, body) = multipart_upload(file_name, &bytes);
        let ex = self.exchange("POST", "files", Some((&content_type, body)));
        if !ex.ok() {
            return Err(Error::Transport(format!(
                "uploading {}: {}",
                dataset_path.display(),
                ex.diagnostic.unwrap_or_default()
            )));
        }
        let uploaded: Value = serde_json::from_str(&ex.body)
            .map_err(|e| Error::Transport(format!("file upload response is not JSON: {e}")))?;
        let file_id = uploaded["id"]
            .as_str()
            .ok_or_else(|| Error::Transport("file upload response has no id".into()))?
            .to_string();
        let request = finetune_job_request(&self.spec.model_id, &file_id, hyper);
        let created = self.json_call(
            "POST",
            "fine_tuning/jobs",
            Some(&request),
            &format!("creating fine-tune job for file {file_id}"),
        )?;
        serde_json::from_value(created)
            .map_err(|e| Error::Transport(format!("fine-tune job for file {file_id}: {e}")))
    }

    pub fn finetune_status(&self, job_id: &str) -> Result<FinetuneJob> {
        let what = format!("fine-tune job {job_id}");
        let v = self.json_call("GET", &format!("fine_tuning/jobs/{job_id}"), None, &what)?;
        serde_json::from_value(v).map_err(|e| Error::Transport(format!("{what}: {e}")))
    }

    /// Polls until the job is terminal. A job that ends in anything other
    /// than `succeeded` is an error naming the job.
    pub fn wait_for_finetune(&self, job_id: &str, poll: Duration, timeout: Duration) -> Result<FinetuneJob> {
        let start = Instant::now();
        loop {
            let job = self.finetune_status(job_id)?;
            if job.is_terminal() {
                if job.status == "succeeded" && job.fine_tuned_model.is_some() {
                    return Ok(job);
                }
                return Err(Error::Transport(format!(
                    "fine-tune job {job_id} ended with status {} ({})",
                    job.status,
                    job.error.as_ref().map(|e| e.to_string()).unwrap_or_default()
                )));
            }
            if start.elapsed() >= timeout {
                return Err(Error::Transport(format!(
                    "fine-tune job {job_id} still {} after {:.0}s",
                    job.status,
                    timeout.as_secs_f64()
                )));
            }
            std::thread::sleep(poll);
        }
    }
}

impl Completer for RemoteBackend {
    fn complete(&self, prompt: &PromptBundle) -> Result<CompletionResult> {
        let start = Instant::now();
        let body = self.chat_request_body(prompt);
        let ex = self.exchange(
            "POST",
            "chat/completions",
            Some(("application/json", body.to_string().into_bytes())),
        );
        let latency_secs = start.elapsed().as_secs_f64();
        let failed = |diagnostic: String| CompletionResult {
            text: String::new(),
            latency_secs,
            attempt_count: ex.attempts,
            transport_status: TransportStatus::Failed,
            diagnostic: Some(diagnostic),
        };
        if !ex.ok() {
            return Ok(failed(ex.diagnostic.clone().unwrap_or_default()));
        }
        let text = serde_json::from_str::<Value>(&ex.body)
            .ok()
            .and_then(|v| v["choices"][0]["message"]["content"].as_str().map(str::to_string));
        Ok(match text {
            Some(text) => CompletionResult {
                text,
                latency_secs,
                attempt_count: ex.attempts,
                transport_status: if ex.attempts > 1 {
                    TransportStatus::RetriedOk
                } else {
                    TransportStatus::Ok
                },
                diagnostic: None,
            },
            None => failed(format!("unexpected response shape: {}", snippet(&ex.body))),
        })
    }

    fn max_in_flight(&self) -> usize {
        self.spec.max_in_flight
    }

    fn describe(&self) -> Value {
        self.spec.describe()
    }
}

pub fn finetune_job_request(model_id: &str, file_id: &str, hyper: FinetuneHyperparameters) -> Value {
    json!({
        "model": model_id,
        "training_file": file_id,
        "hyperparameters": {
            "n_epochs": hyper.n_epochs,
            "batch_size": hyper.batch_size,
            "learning_rate_multiplier": hyper.learning_rate_multiplier,
        },
    })
}

fn dataset_kind(path: &Path, records: &[crate::dataset::FinetuneRecord]) -> Result<DatasetKind> {
    let label = path.display().to_string();
    let mut kind = None;
    for (i, r) in records.iter().enumerate() {
        let k = r.validate().map_err(|message| Error::Validation {
            path: label.clone(),
            line: i + 1,
            message,
        })?;
        if kind.is_some_and(|prev| prev != k) {
            return Err(Error::Validation {
                path: label,
                line: i + 1,
                message: "dataset mixes preference and introspection records".into(),
            });
        }
        kind = Some(k);
    }
    kind.ok_or_else(|| Error::Validation {
        path: label,
        line: 0,
        message: "dataset is empty".into(),
    })
}

fn multipart_upload(file_name: &str, bytes: &[u8]) -> (String, Vec<u8>) {
    let boundary = "selfreport-upload-7d1c9a4e";
    let mut body = Vec::with_capacity(bytes.len() + 512);
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"purpose\"\r\n\r\nfine-tune\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"{file_name}\"\r\n\
             Content-Type: application/jsonl\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    (format!("multipart/form-data; boundary={boundary}"), body)
}

fn snippet(text: &str) -> String {
    let t = text.trim();
    match t.char_indices().nth(200) {
        Some((i, _)) => format!("{}...", &t[..i]),
        None => t.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let p = FinetuneHyperparameters::defaults(DatasetKind::Preference, "gpt-4o-2024-08-06");
        assert_eq!((p.n_epochs, p.batch_size, p.learning_rate_multiplier), (3, 10, 2.0));
        let i = FinetuneHyperparameters::defaults(DatasetKind::Introspection, "gpt-4o-mini-2024-07-18");
        assert_eq!((i.n_epochs, i.batch_size, i.learning_rate_multiplier), (3, 1, 1.8));
    }

    #[test]
    fn hosts_and_loopback() {
        assert_eq!(endpoint_host("https://api.openai.com/v1"), Some("api.openai.com"));
        assert_eq!(endpoint_host("http://127.0.0.1:8080/v1"), Some("127.0.0.1"));
        assert_eq!(endpoint_host("http://[::1]:9/v1"), Some("::1"));
        assert_eq!(endpoint_host("ftp://x"), None);
        assert!(is_loopback("http://localhost:1/v1"));
        assert!(is_loopback("http://[::1]:9/v1"));
        assert!(!is_loopback("https://api.openai.com/v1"));
    }

    #[test]
    fn remote_needs_credential_off_loopback() {
        let spec = BackendSpec {
            kind: BackendKind::Remote,
            credential_env_var_name: "SELFREPORT_SURELY_UNSET_VAR".into(),
            ..BackendSpec::default()
        };
        assert!(matches!(RemoteBackend::new(spec), Err(Error::Config(_))));
    }
}
