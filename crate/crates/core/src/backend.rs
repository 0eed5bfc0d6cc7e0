//! One completion per call, from either a remote chat endpoint or the
//! synthetic subject.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ContextSet;
use crate::prompts::{parse_prompt, PromptBundle, TaskKind};
use crate::seed::Seed;
use crate::subject::{subject_decide, subject_report, SubjectConfig};

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
pub const DEFAULT_CREDENTIAL_VAR: &str = "OPENAI_API_KEY";
pub const DEFAULT_MODEL: &str = "gpt-4o-2024-08-06";

/// Token budget per task: one letter for decisions, room for a five-member
/// JSON object for introspection.
pub fn max_tokens(kind: TaskKind) -> u32 {
    match kind {
        TaskKind::Decision => 2,
        TaskKind::Introspection => 200,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub model_id: String,
    pub endpoint_url: String,
    pub credential_env_var_name: String,
    pub subject_config_path: Option<PathBuf>,
    pub request_timeout_secs: f64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// First retry waits this long; each further retry doubles it.
    pub backoff_base_ms: u64,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            kind: BackendKind::Synthetic,
            model_id: DEFAULT_MODEL.to_string(),
            endpoint_url: DEFAULT_ENDPOINT.to_string(),
            credential_env_var_name: DEFAULT_CREDENTIAL_VAR.to_string(),
            subject_config_path: None,
            request_timeout_secs: 60.0,
            max_retries: 5,
            max_in_flight: 8,
            backoff_base_ms: 500,
        }
    }
}

impl BackendSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight < 1 {
            return Err(Error::config("max_in_flight must be at least 1"));
        }
        if self.request_timeout_secs.is_nan() || self.request_timeout_secs <= 0.0 {
            return Err(Error::config("request_timeout_secs must be positive"));
        }
        Ok(())
    }

    /// Description safe to persist: no credential values.
    pub fn describe(&self) -> serde_json::Value {
        match self.kind {
            BackendKind::Synthetic => serde_json::json!({
                "kind": "synthetic",
                "subject_config_path": self.subject_config_path,
            }),
            BackendKind::Remote => serde_json::json!({
                "kind": "remote",
                "model_id": self.model_id,
                "endpoint_url": self.endpoint_url,
                "credential_env_var_name": self.credential_env_var_name,
                "max_retries": self.max_retries,
                "max_in_flight": self.max_in_flight,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportStatus {
    Ok,
    RetriedOk,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub latency_secs: f64,
    pub attempt_count: u32,
    pub transport_status: TransportStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl CompletionResult {
    pub fn succeeded(&self) -> bool {
        self.transport_status != TransportStatus::Failed
    }
}

/// Anything that answers rendered prompts.
///
/// Transport trouble is reported inside the [`CompletionResult`]; an `Err`
/// means the request itself is broken (for example a prompt the synthetic
/// subject cannot parse back) and the whole batch should stop.
pub trait Completer: Send + Sync {
    fn complete(&self, prompt: &PromptBundle) -> Result<CompletionResult>;

    fn max_in_flight(&self) -> usize {
        1
    }

    fn describe(&self) -> serde_json::Value;
}

/// Runs a batch with at most `max_in_flight` requests outstanding. Results
/// come back in prompt order regardless of completion order.
pub fn complete_batch(backend: &dyn Completer, prompts: &[PromptBundle]) -> Result<Vec<CompletionResult>> {
    let workers = backend.max_in_flight().max(1).min(prompts.len().max(1));
    let slots: Vec<Mutex<Option<Result<CompletionResult>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= prompts.len() {
                    break;
                }
                let outcome = backend.complete(&prompts[i]);
                let failed = outcome.is_err();
                *slots[i].lock().expect("slot lock") = Some(outcome);
                if failed {
                    // stop handing out work; already-running calls finish
                    next.store(prompts.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(prompts.len());
    for slot in slots {
        match slot.into_inner().expect("slot lock") {
            Some(r) => out.push(r?),
            None => {
                return Err(Error::Transport(
                    "batch aborted before every prompt was sent".into(),
                ))
            }
        }
    }
    Ok(out)
}

/// Answers a rendered prompt as the synthetic subject.
///
/// The prompt is parsed back into `(context, pair)` first; drift between the
/// renderer and the parser, or a context the subject does not know, is a
/// hard error.
pub fn synthetic_complete(
    subject: &SubjectConfig,
    contexts: &ContextSet,
    prompt: &PromptBundle,
    seed: Seed,
) -> Result<String> {
    let (parsed, context) = parse_prompt(&prompt.system_text, &prompt.user_text, contexts, prompt.pair_id)?;
    if !prompt.context_id.is_empty() && prompt.context_id != context.context_id {
        return Err(Error::Drift(format!(
            "prompt tagged {} renders context {}",
            prompt.context_id, context.context_id
        )));
    }
    if parsed.task_kind != prompt.task_kind {
        return Err(Error::Drift(format!(
            "prompt tagged {:?} renders a {:?} task",
            prompt.task_kind, parsed.task_kind
        )));
    }
    match parsed.task_kind {
        TaskKind::Decision => Ok(subject_decide(subject, context, &parsed.pair, seed)?.to_string()),
        TaskKind::Introspection => subject_report(subject, context, seed),
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    pub subject: SubjectConfig,
    pub contexts: ContextSet,
    /// Completion seeds derive from this plus `(task, context, trial)`.
    pub seed: Seed,
    pub max_in_flight: usize,
    pub label: String,
}

impl SyntheticBackend {
    pub fn new(subject: SubjectConfig, contexts: ContextSet, seed: Seed) -> Result<Self> {
        subject.validate()?;
        Ok(SyntheticBackend {
            subject,
            contexts,
            seed,
            max_in_flight: 4,
            label: "synthetic".to_string(),
        })
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn call_seed(&self, prompt: &PromptBundle) -> Seed {
        self.seed
            .derive(prompt.task_kind.as_str(), &prompt.context_id, prompt.pair_id)
    }
}

impl Completer for SyntheticBackend {
    fn complete(&self, prompt: &PromptBundle) -> Result<CompletionResult> {
        let text = synthetic_complete(&self.subject, &self.contexts, prompt, self.call_seed(prompt))?;
        Ok(CompletionResult {
            text,
            latency_secs: 0.0,
            attempt_count: 1,
            transport_status: TransportStatus::Ok,
            diagnostic: None,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "synthetic",
            "label": self.label,
            "choice_sharpness": if self.subject.choice_sharpness.is_infinite() {
                serde_json::json!("inf")
            } else {
                serde_json::json!(self.subject.choice_sharpness)
            },
            "report_noise_sd": self.subject.report_noise_sd,
            "report_shrinkage": self.subject.report_shrinkage,
            "invalid_report_rate": self.subject.invalid_report_rate,
        })
    }
}
