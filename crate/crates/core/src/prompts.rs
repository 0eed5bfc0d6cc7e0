//! Prompt rendering and its exact inverse.
//!
//! The decision and introspection prompts share everything except the task
//! block. [`parse_prompt`] recovers the context and option pair from
//! rendered text and re-renders it, so any drift between the two directions
//! surfaces as an error instead of silently skewed data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChoicePair, ContextSet, DecisionContext, OptionProfile};

pub const SYSTEM_PROMPT: &str =
    "Your job is to make hypothetical decisions on behalf of different people or characters.";

pub const DECISION_TASK: &str = "[DECISION TASK] Respond with \"A\" if you think Option A is \
better, or \"B\" if you think Option B is better. Never respond with anything except \"A\" or \"B\":";

pub const INTROSPECTION_TASK: &str = "[INTROSPECTION TASK] Respond with how heavily you believe \
you weighted each of the five dimensions while making your decision on a scale from -100 to 100. \
Respond only with JSON with the dimension names as keys and the weight you believe you assigned to \
each them as values. Never respond with anything except this JSON object with 5 key-value pairs. \
(Do not report your decision itself.):";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Decision,
    Introspection,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Decision => "decision",
            TaskKind::Introspection => "introspection",
        }
    }

    pub fn task_block(self) -> &'static str {
        match self {
            TaskKind::Decision => DECISION_TASK,
            TaskKind::Introspection => INTROSPECTION_TASK,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub task_kind: TaskKind,
    pub context_id: String,
    pub pair_id: u64,
}

fn format_value(value: f64, precision: u32) -> String {
    format!("{:.*}", precision as usize, value)
}

fn option_block(out: &mut String, label: &str, option: &[f64; 5], context: &DecisionContext) {
    out.push_str(label);
    out.push_str(":\n");
    for (i, (spec, value)) in context.attributes.iter().zip(option).enumerate() {
        out.push_str(&spec.name);
        out.push_str(": ");
        out.push_str(&format_value(*value, spec.display_precision));
        out.push(' ');
        out.push_str(&spec.unit);
        if i + 1 < context.attributes.len() {
            out.push('\n');
        }
    }
}

fn identity_line(context: &DecisionContext) -> String {
    format!(
        "Imagine you are {}. {}",
        context.agent_name, context.item_question
    )
}

fn render_user(context: &DecisionContext, pair: &ChoicePair, kind: TaskKind) -> Result<String> {
    pair.validate(context)?;
    let a = pair.option_a.values_for(context)?;
    let b = pair.option_b.values_for(context)?;
    let mut out = String::with_capacity(1024);
    out.push_str(kind.task_block());
    out.push_str("\n\n");
    out.push_str(&identity_line(context));
    out.push_str("\n\n");
    option_block(&mut out, "A", &a, context);
    out.push_str("\n\n");
    option_block(&mut out, "B", &b, context);
    Ok(out)
}

pub fn render_prompt(
    context: &DecisionContext,
    pair: &ChoicePair,
    kind: TaskKind,
) -> Result<PromptBundle> {
    Ok(PromptBundle {
        system_text: SYSTEM_PROMPT.to_string(),
        user_text: render_user(context, pair, kind)?,
        task_kind: kind,
        context_id: context.context_id.clone(),
        pair_id: pair.pair_id,
    })
}

pub fn render_decision_prompt(context: &DecisionContext, pair: &ChoicePair) -> Result<PromptBundle> {
    render_prompt(context, pair, TaskKind::Decision)
}

pub fn render_introspection_prompt(
    context: &DecisionContext,
    pair: &ChoicePair,
) -> Result<PromptBundle> {
    render_prompt(context, pair, TaskKind::Introspection)
}

/// What [`parse_prompt`] recovers from rendered text.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedPrompt {
    pub task_kind: TaskKind,
    pub pair: ChoicePair,
}

fn drift(msg: impl Into<String>) -> Error {
    Error::Drift(msg.into())
}

fn parse_option(block: &str, label: &str, context: &DecisionContext) -> Result<OptionProfile> {
    let mut lines = block.split('\n');
    if lines.next() != Some(&format!("{label}:")[..]) {
        return Err(drift(format!("expected option header {label}:")));
    }
    let mut values = Vec::with_capacity(context.attributes.len());
    for spec in &context.attributes {
        let line = lines
            .next()
            .ok_or_else(|| drift(format!("option {label} is missing {}", spec.name)))?;
        let rest = line
            .strip_prefix(&spec.name)
            .and_then(|r| r.strip_prefix(": "))
            .ok_or_else(|| drift(format!("expected attribute {} in line {line:?}", spec.name)))?;
        let number = rest
            .strip_suffix(&spec.unit)
            .and_then(|r| r.strip_suffix(' '))
            .ok_or_else(|| drift(format!("expected unit {:?} in line {line:?}", spec.unit)))?;
        let value: f64 = number
            .parse()
            .map_err(|_| drift(format!("non-numeric value in line {line:?}")))?;
        values.push(value);
    }
    if let Some(extra) = lines.next() {
        return Err(drift(format!("unexpected line {extra:?} in option {label}")));
    }
    Ok(OptionProfile::from_values(context, &values))
}

/// Recovers `(task, context, pair)` from a rendered prompt and checks that
/// re-rendering reproduces the input byte for byte.
pub fn parse_prompt<'a>(
    system_text: &str,
    user_text: &str,
    contexts: &'a ContextSet,
    pair_id: u64,
) -> Result<(ParsedPrompt, &'a DecisionContext)> {
    if system_text != SYSTEM_PROMPT {
        return Err(drift("system prompt differs from the fixed template"));
    }
    let blocks: Vec<&str> = user_text.split("\n\n").collect();
    if blocks.len() != 4 {
        return Err(drift(format!(
            "expected 4 blank-line separated blocks, found {}",
            blocks.len()
        )));
    }
    let task_kind = match blocks[0] {
        DECISION_TASK => TaskKind::Decision,
        INTROSPECTION_TASK => TaskKind::Introspection,
        other => return Err(drift(format!("unrecognized task block {other:?}"))),
    };
    let context = contexts
        .iter()
        .find(|c| identity_line(c) == blocks[1])
        .ok_or_else(|| drift(format!("no known context matches {:?}", blocks[1])))?;
    let pair = ChoicePair {
        context_id: context.context_id.clone(),
        pair_id,
        option_a: parse_option(blocks[2], "A", context)?,
        option_b: parse_option(blocks[3], "B", context)?,
    };
    pair.validate(context)
        .map_err(|e| drift(format!("recovered pair is invalid: {e}")))?;
    let rerendered = render_user(context, &pair, task_kind)?;
    if rerendered != user_text {
        return Err(drift(format!(
            "re-rendered prompt for {} differs from the input",
            context.context_id
        )));
    }
    Ok((ParsedPrompt { task_kind, pair }, context))
}
