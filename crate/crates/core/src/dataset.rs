//! Chat fine-tuning datasets in JSON-Lines form.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decide, sample_pair, ContextSet, DecisionContext, WeightTable};
use crate::prompts::{render_decision_prompt, render_introspection_prompt, PromptBundle};
use crate::report::{parse_report, render_weights_json};
use crate::seed::Seed;

pub const DEFAULT_PER_AGENT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Preference,
    Introspection,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Preference => "preference",
            DatasetKind::Introspection => "introspection",
        }
    }
}

impl FinetuneRecord {
    pub fn new(prompt: &PromptBundle, answer: String) -> Self {
        FinetuneRecord {
            messages: vec![
                ChatMessage {
                    role: Role::System,
                    content: prompt.system_text.clone(),
                },
                ChatMessage {
                    role: Role::User,
                    content: prompt.user_text.clone(),
                },
                ChatMessage {
                    role: Role::Assistant,
                    content: answer,
                },
            ],
        }
    }

    pub fn system(&self) -> &str {
        &self.messages[0].content
    }

    pub fn user(&self) -> &str {
        &self.messages[1].content
    }

    pub fn assistant(&self) -> &str {
        &self.messages[2].content
    }

    /// Shape check: system, user, assistant in that order; the assistant
    /// answer is `A`/`B` or a five-member JSON object of numbers.
    pub fn validate(&self) -> std::result::Result<DatasetKind, String> {
        let roles: Vec<Role> = self.messages.iter().map(|m| m.role).collect();
        if roles != [Role::System, Role::User, Role::Assistant] {
            return Err(format!(
                "expected roles system, user, assistant; found {roles:?}"
            ));
        }
        let answer = self.assistant();
        if answer == "A" || answer == "B" {
            return Ok(DatasetKind::Preference);
        }
        match serde_json::from_str::<serde_json::Value>(answer) {
            Ok(serde_json::Value::Object(map))
                if map.len() == 5 && map.values().all(|v| v.is_number()) =>
            {
                Ok(DatasetKind::Introspection)
            }
            _ => Err(format!(
                "assistant content {answer:?} is neither A/B nor a 5-key JSON object"
            )),
        }
    }
}

fn targets_for<'a>(
    targets: &'a WeightTable,
    context: &DecisionContext,
) -> Result<&'a crate::model::WeightVector> {
    targets.get(&context.context_id).ok_or_else(|| {
        Error::config(format!(
            "no target weights for context {}",
            context.context_id
        ))
    })
}

/// `per_agent` labelled choices per context, each on a freshly sampled pair.
pub fn emit_preference_dataset(
    contexts: &ContextSet,
    targets: &WeightTable,
    per_agent: usize,
    seed: Seed,
) -> Result<Vec<FinetuneRecord>> {
    if per_agent == 0 {
        return Err(Error::config("per_agent must be at least 1"));
    }
    let stream = seed.stream("preference-dataset");
    let mut out = Vec::with_capacity(contexts.len() * per_agent);
    for ctx in contexts {
        let target = targets_for(targets, ctx)?;
        for i in 0..per_agent as u64 {
            let pair = sample_pair(stream, ctx, i);
            let prompt = render_decision_prompt(ctx, &pair)?;
            let label = decide(target, &pair, ctx)?;
            out.push(FinetuneRecord::new(&prompt, label.as_str().to_string()));
        }
    }
    Ok(out)
}

/// One introspection example per context: an introspection prompt over a
/// sampled pair answered with the context's target weights.
pub fn emit_introspection_dataset(
    contexts: &ContextSet,
    targets: &WeightTable,
    seed: Seed,
) -> Result<Vec<FinetuneRecord>> {
    let stream = seed.stream("introspection-dataset");
    contexts
        .iter()
        .map(|ctx| {
            let target = targets_for(targets, ctx)?;
            let pair = sample_pair(stream, ctx, 0);
            let prompt = render_introspection_prompt(ctx, &pair)?;
            let answer = render_weights_json(ctx, &target.values_for(ctx)?, Some(1));
            debug_assert!(parse_report(&answer, ctx).is_valid());
            Ok(FinetuneRecord::new(&prompt, answer))
        })
        .collect()
}

pub fn to_jsonl(records: &[FinetuneRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, records: &[FinetuneRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(to_jsonl(records).as_bytes())?;
    Ok(())
}

/// Parses and validates a dataset file line by line; the first bad line is
/// reported with its 1-based number.
pub fn parse_jsonl(path_label: &str, text: &str) -> Result<Vec<FinetuneRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fail = |message: String| Error::Validation {
            path: path_label.to_string(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() {
            return Err(fail("empty line".into()));
        }
        let record: FinetuneRecord =
            serde_json::from_str(line).map_err(|e| fail(format!("not a chat record: {e}")))?;
        record.validate().map_err(fail)?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<FinetuneRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_jsonl(&path.display().to_string(), &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sample_weight_table;

    #[test]
    fn record_serializes_in_chat_upload_shape() {
        let r = FinetuneRecord {
            messages: vec![
                ChatMessage { role: Role::System, content: "s".into() },
                ChatMessage { role: Role::User, content: "u".into() },
                ChatMessage { role: Role::Assistant, content: "A".into() },
            ],
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"messages":[{"role":"system","content":"s"},{"role":"user","content":"u"},{"role":"assistant","content":"A"}]}"#
        );
    }

    #[test]
    fn preference_dataset_requires_targets_and_positive_count() {
        let contexts = ContextSet::builtin("original-100").unwrap();
        let mut targets = sample_weight_table(Seed(1), &contexts);
        assert!(emit_preference_dataset(&contexts, &targets, 0, Seed(1)).is_err());
        targets.shift_remove_index(5);
        let err = emit_preference_dataset(&contexts, &targets, 1, Seed(1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(emit_introspection_dataset(&contexts, &targets, Seed(1)).is_err());
    }

    #[test]
    fn malformed_lines_are_located() {
        let good = r#"{"messages":[{"role":"system","content":"s"},{"role":"user","content":"u"},{"role":"assistant","content":"B"}]}"#;
        let bad_role = r#"{"messages":[{"role":"user","content":"u"},{"role":"system","content":"s"},{"role":"assistant","content":"B"}]}"#;
        let bad_answer = r#"{"messages":[{"role":"system","content":"s"},{"role":"user","content":"u"},{"role":"assistant","content":"maybe"}]}"#;
        assert_eq!(parse_jsonl("x", &format!("{good}\n{good}\n")).unwrap().len(), 2);
        for (text, line) in [
            (format!("{good}\n{bad_role}\n"), 2),
            (format!("{bad_answer}\n"), 1),
            (format!("{good}\n{good}\nnot json\n"), 3),
        ] {
            match parse_jsonl("x", &text) {
                Err(Error::Validation { line: l, .. }) => assert_eq!(l, line),
                other => panic!("expected validation error, got {other:?}"),
            }
        }
    }
}
