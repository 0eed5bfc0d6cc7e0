//! Introspective weight reports: rendering the JSON answer and validating
//! what a model sends back.

use std::fmt;

use indexmap::IndexMap;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::model::{DecisionContext, WeightRole, WeightVector, WEIGHT_LIMIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    NotJson,
    MissingAttribute,
    ExtraAttribute,
    NonNumeric,
    WrongCount,
}

impl InvalidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            InvalidReason::NotJson => "not_json",
            InvalidReason::MissingAttribute => "missing_attribute",
            InvalidReason::ExtraAttribute => "extra_attribute",
            InvalidReason::NonNumeric => "non_numeric",
            InvalidReason::WrongCount => "wrong_count",
        }
    }
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One introspective report. Exactly one of `parsed` / `invalid_reason` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub context_id: String,
    pub trial_index: u64,
    pub raw_text: String,
    pub parsed: Option<WeightVector>,
    pub invalid_reason: Option<InvalidReason>,
    /// Attributes whose reported value fell outside [-100, 100] and was clamped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped: Vec<String>,
}

impl ReportRecord {
    pub fn is_valid(&self) -> bool {
        self.parsed.is_some()
    }

    pub fn with_trial(mut self, trial_index: u64) -> Self {
        self.trial_index = trial_index;
        self
    }
}

/// Renders weights as the one-line JSON object used in introspection answers.
///
/// `precision = None` writes the shortest representation that round-trips.
pub fn render_weights_json(
    context: &DecisionContext,
    values: &[f64],
    precision: Option<u32>,
) -> String {
    let mut out = String::from("{");
    for (i, (spec, v)) in context.attributes.iter().zip(values).enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&serde_json::to_string(&spec.name).expect("string serializes"));
        out.push_str(": ");
        let v = if *v == 0.0 { 0.0 } else { *v };
        match precision {
            Some(p) => {
                let s = format!("{:.*}", p as usize, v);
                // "-0.0" after rounding
                if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
                    out.push_str(s.trim_start_matches('-'));
                } else {
                    out.push_str(&s);
                }
            }
            None => out.push_str(&serde_json::to_string(&v).expect("finite number serializes")),
        }
    }
    out.push('}');
    out
}

fn strip_fences(raw: &str) -> &str {
    let text = raw.trim();
    let Some(rest) = text.strip_prefix("```") else {
        return text;
    };
    let Some(body) = rest.strip_suffix("```") else {
        return text;
    };
    // drop an optional info string such as `json`
    match body.find('\n') {
        Some(pos) if body[..pos].chars().all(|c| c.is_ascii_alphanumeric()) => body[pos + 1..].trim(),
        _ => body.trim(),
    }
}

/// Object members in source order, duplicates preserved.
struct Members(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for Members {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct MembersVisitor;

        impl<'de> Visitor<'de> for MembersVisitor {
            type Value = Members;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Members, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(Members(out))
            }
        }

        deserializer.deserialize_map(MembersVisitor)
    }
}

fn invalid(context: &DecisionContext, raw: &str, reason: InvalidReason) -> ReportRecord {
    ReportRecord {
        context_id: context.context_id.clone(),
        trial_index: 0,
        raw_text: raw.to_string(),
        parsed: None,
        invalid_reason: Some(reason),
        clamped: Vec::new(),
    }
}

/// Validates a raw introspection response against the context's attributes.
///
/// Only a single JSON object whose keys are exactly the five attribute names
/// with numeric values is accepted. Whitespace and code fences are
/// stripped first. Out-of-range values are clamped to [-100, 100] and listed
/// in `clamped`.
pub fn parse_report(raw: &str, context: &DecisionContext) -> ReportRecord {
    let body = strip_fences(raw);
    let members = match serde_json::from_str::<Members>(body) {
        Ok(m) => m.0,
        Err(_) => return invalid(context, raw, InvalidReason::NotJson),
    };

    if members
        .iter()
        .any(|(k, _)| context.attribute(k).is_none())
    {
        return invalid(context, raw, InvalidReason::ExtraAttribute);
    }
    if context
        .attribute_names()
        .any(|name| !members.iter().any(|(k, _)| k == name))
    {
        return invalid(context, raw, InvalidReason::MissingAttribute);
    }
    if members.len() != context.attributes.len() {
        // every attribute present, no strangers, so some key repeats
        return invalid(context, raw, InvalidReason::WrongCount);
    }

    let mut entries = IndexMap::with_capacity(members.len());
    let mut clamped = Vec::new();
    for spec in &context.attributes {
        let value = members
            .iter()
            .find(|(k, _)| *k == spec.name)
            .and_then(|(_, v)| v.as_f64());
        let Some(value) = value else {
            return invalid(context, raw, InvalidReason::NonNumeric);
        };
        let bounded = value.clamp(-WEIGHT_LIMIT, WEIGHT_LIMIT);
        if bounded != value {
            clamped.push(spec.name.clone());
        }
        entries.insert(spec.name.clone(), bounded);
    }

    ReportRecord {
        context_id: context.context_id.clone(),
        trial_index: 0,
        raw_text: raw.to_string(),
        parsed: Some(WeightVector {
            entries,
            role: WeightRole::Reported,
        }),
        invalid_reason: None,
        clamped,
    }
}
