mod common;

use std::sync::Mutex;
use std::time::Duration;

use common::*;
use selfreport::backend::{complete_batch, BackendKind, BackendSpec, Completer, TransportStatus};
use selfreport::dataset::{emit_introspection_dataset, emit_preference_dataset, write_jsonl, DatasetKind};
use selfreport::experiment::targets_for;
use selfreport::mock::{FailureScript, MockResponder, MockServer};
use selfreport::model::sample_weight_table;
use selfreport::prompts::render_decision_prompt;
use selfreport::remote::{FinetuneHyperparameters, RemoteBackend};
use selfreport::subject::SubjectConfig;
use selfreport::{Error, Seed};

/// Held by tests whose outcome depends on NO_NETWORK.
static ENV: Mutex<()> = Mutex::new(());

fn fixed(failures: FailureScript) -> MockServer {
    MockServer::start(MockResponder::Fixed("A".into()), failures).unwrap()
}

fn spec(endpoint: String, credential_var: &str) -> BackendSpec {
    BackendSpec {
        kind: BackendKind::Remote,
        endpoint_url: endpoint,
        credential_env_var_name: credential_var.into(),
        max_retries: 3,
        backoff_base_ms: 1,
        ..BackendSpec::default()
    }
}

fn prompt() -> selfreport::prompts::PromptBundle {
    render_decision_prompt(&vacuum(), &appendix_pair()).unwrap()
}

#[test]
fn rate_limits_are_retried() {
    let server = fixed(FailureScript { leading: vec![429, 429], every_nth: None });
    let backend = RemoteBackend::new(spec(server.endpoint(), "SELFREPORT_TEST_UNSET")).unwrap();
    let result = backend.complete(&prompt()).unwrap();
    assert_eq!(result.text, "A");
    assert_eq!(result.attempt_count, 3);
    assert_eq!(result.transport_status, TransportStatus::RetriedOk);
    assert_eq!(server.chat_requests(), 3);
}

#[test]
fn client_errors_fail_fast() {
    let server = fixed(FailureScript { leading: vec![400], every_nth: None });
    let backend = RemoteBackend::new(spec(server.endpoint(), "SELFREPORT_TEST_UNSET")).unwrap();
    let result = backend.complete(&prompt()).unwrap();
    assert_eq!(result.transport_status, TransportStatus::Failed);
    assert_eq!(result.attempt_count, 1);
    assert!(result.diagnostic.unwrap().contains("400"));
}

#[test]
fn persistent_server_errors_exhaust_the_retry_budget() {
    let server = fixed(FailureScript { leading: vec![503; 10], every_nth: None });
    let backend = RemoteBackend::new(spec(server.endpoint(), "SELFREPORT_TEST_UNSET")).unwrap();
    let result = backend.complete(&prompt()).unwrap();
    assert_eq!(result.transport_status, TransportStatus::Failed);
    assert_eq!(result.attempt_count, 4);
    assert_eq!(server.chat_requests(), 4);
}

#[test]
fn batches_keep_prompt_order() {
    let ctx = original();
    let targets = sample_weight_table(Seed(1), &ctx);
    let responder = MockResponder::Synthetic {
        base: SubjectConfig::new(targets.clone()),
        trained: None,
        contexts: ctx.clone(),
        seed: Seed(2),
    };
    let server = MockServer::start(responder, FailureScript { leading: vec![], every_nth: Some((5, 503)) }).unwrap();
    let mut s = spec(server.endpoint(), "SELFREPORT_TEST_UNSET");
    s.max_in_flight = 6;
    let backend = RemoteBackend::new(s).unwrap();
    let pairs: Vec<_> = (0..40u64)
        .map(|i| {
            let c = &ctx.contexts()[i as usize % 10];
            (c.clone(), selfreport::model::sample_pair(Seed(3), c, i))
        })
        .collect();
    let prompts: Vec<_> = pairs.iter().map(|(c, p)| render_decision_prompt(c, p).unwrap()).collect();
    let results = complete_batch(&backend, &prompts).unwrap();
    for ((c, p), r) in pairs.iter().zip(&results) {
        let w = targets[&c.context_id].values_for(c).unwrap();
        let a = p.option_a.values_for(c).unwrap();
        let b = p.option_b.values_for(c).unwrap();
        assert_eq!(r.text, oracle_choice(&w, &a, &b, c));
    }
    let attempts: u32 = results.iter().map(|r| r.attempt_count).sum();
    assert_eq!(attempts as u64, server.chat_requests());
}

#[test]
fn credential_goes_only_into_the_header() {
    let var = "SELFREPORT_TEST_KEY_HEADER";
    let secret = "sk-test-3b8e01";
    std::env::set_var(var, secret);
    let server = fixed(FailureScript::default());
    let backend = RemoteBackend::new(spec(server.endpoint(), var)).unwrap();
    backend.complete(&prompt()).unwrap();
    let requests = server.requests();
    assert_eq!(requests[0].authorization.as_deref(), Some(format!("Bearer {secret}").as_str()));
    assert!(!requests[0].body.contains(secret));
    let debug = format!("{backend:?}");
    assert!(debug.contains("redacted") && !debug.contains(secret));
    assert!(!backend.describe().to_string().contains(secret));
}

#[test]
fn remote_endpoints_need_a_credential() {
    let _env = ENV.lock().unwrap();
    let err = RemoteBackend::new(spec("https://api.example.com/v1".into(), "SELFREPORT_TEST_UNSET")).unwrap_err();
    assert!(err.to_string().contains("SELFREPORT_TEST_UNSET"), "{err}");
}

#[test]
fn no_network_blocks_non_loopback_hosts() {
    let _env = ENV.lock().unwrap();
    let var = "SELFREPORT_TEST_KEY_NONET";
    std::env::set_var(var, "sk-x");
    std::env::set_var("NO_NETWORK", "1");
    let blocked = RemoteBackend::new(spec("https://api.example.com/v1".into(), var));
    let loopback = RemoteBackend::new(spec("http://127.0.0.1:9/v1".into(), var));
    std::env::remove_var("NO_NETWORK");
    assert!(matches!(blocked, Err(Error::Config(ref m)) if m.contains("NO_NETWORK")));
    assert!(loopback.is_ok());
}

#[test]
fn finetune_jobs_use_the_default_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = original();
    let targets = targets_for(Seed(5), &ctx);
    let preference = dir.path().join("preference.jsonl");
    let introspection = dir.path().join("introspection.jsonl");
    write_jsonl(&preference, &emit_preference_dataset(&ctx, &targets, 2, Seed(5)).unwrap()).unwrap();
    write_jsonl(&introspection, &emit_introspection_dataset(&ctx, &targets, Seed(5)).unwrap()).unwrap();

    let server = fixed(FailureScript::default());
    let backend = RemoteBackend::new(spec(server.endpoint(), "SELFREPORT_TEST_UNSET")).unwrap();
    let pref = backend.submit_finetune(&preference, None).unwrap();
    let intro = backend.submit_finetune(&introspection, None).unwrap();
    let jobs: Vec<serde_json::Value> = server
        .requests()
        .iter()
        .filter(|r| r.path == "/v1/fine_tuning/jobs")
        .map(|r| serde_json::from_str(&r.body).unwrap())
        .collect();
    assert_eq!(jobs.len(), 2);
    let hyper = |v: &serde_json::Value| {
        let h = &v["hyperparameters"];
        (h["n_epochs"].as_u64().unwrap(), h["batch_size"].as_u64().unwrap(), h["learning_rate_multiplier"].as_f64().unwrap())
    };
    assert_eq!(hyper(&jobs[0]), (3, 10, 2.0));
    assert_eq!(hyper(&jobs[1]), (3, 1, 2.0));
    assert_eq!(
        FinetuneHyperparameters::defaults(DatasetKind::Introspection, "gpt-4o-mini-2024-07-18").learning_rate_multiplier,
        1.8
    );

    let done = backend.wait_for_finetune(&pref.id, Duration::from_millis(5), Duration::from_secs(5)).unwrap();
    assert_eq!(done.status, "succeeded");
    assert!(done.fine_tuned_model.unwrap().contains(":preference:"));
    let done = backend.wait_for_finetune(&intro.id, Duration::from_millis(5), Duration::from_secs(5)).unwrap();
    assert!(done.fine_tuned_model.unwrap().contains(":introspection:"));
    assert!(backend.finetune_status("ftjob-missing").is_err());
}

#[test]
fn malformed_datasets_are_never_uploaded() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let ctx = original();
    let targets = targets_for(Seed(5), &ctx);
    let mut text = selfreport::dataset::to_jsonl(&emit_preference_dataset(&ctx, &targets, 1, Seed(5)).unwrap());
    text.push_str("{\"messages\": []}\n");
    std::fs::write(&path, text).unwrap();
    let server = fixed(FailureScript::default());
    let backend = RemoteBackend::new(spec(server.endpoint(), "SELFREPORT_TEST_UNSET")).unwrap();
    let err = backend.submit_finetune(&path, None).unwrap_err();
    assert!(matches!(err, Error::Validation { line: 101, .. }), "{err}");
    assert!(server.requests().is_empty());
}
