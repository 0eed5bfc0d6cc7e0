//! Decision contexts, weight vectors and the deterministic choice rule.
//!
//! Attribute values are min-max normalized over the attribute's declared
//! range, utilities are weighted sums of normalized values, and a choice
//! picks the option with the higher utility (ties go to `A`).

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Seed;

/// Number of attributes every decision context carries.
pub const ATTRIBUTE_COUNT: usize = 5;

/// Bounds for target weights.
pub const WEIGHT_LIMIT: f64 = 100.0;

const ORIGINAL_SET: &str = include_str!("../data/original-100.json");
const TRANSFER_SET: &str = include_str!("../data/transfer-100.json");

fn default_precision() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub unit: String,
    pub range_min: f64,
    pub range_max: f64,
    #[serde(default = "default_precision")]
    pub display_precision: u32,
}

impl AttributeSpec {
    pub fn width(&self) -> f64 {
        self.range_max - self.range_min
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.range_min && value <= self.range_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionContext {
    pub context_id: String,
    pub agent_name: String,
    pub decision_type: String,
    pub item_question: String,
    pub attributes: Vec<AttributeSpec>,
}

impl DecisionContext {
    pub fn validate(&self) -> Result<()> {
        if self.context_id.is_empty() {
            return Err(Error::domain("context_id must be nonempty"));
        }
        if self.attributes.len() != ATTRIBUTE_COUNT {
            return Err(Error::domain(format!(
                "context {} has {} attributes, expected {ATTRIBUTE_COUNT}",
                self.context_id,
                self.attributes.len()
            )));
        }
        let mut seen = HashSet::new();
        for spec in &self.attributes {
            if spec.name.is_empty() {
                return Err(Error::domain(format!(
                    "context {} has an unnamed attribute",
                    self.context_id
                )));
            }
            if !seen.insert(spec.name.as_str()) {
                return Err(Error::domain(format!(
                    "context {} repeats attribute {}",
                    self.context_id, spec.name
                )));
            }
            if !(spec.range_min.is_finite() && spec.range_max.is_finite())
                || spec.range_min >= spec.range_max
            {
                return Err(Error::domain(format!(
                    "attribute {} of context {} has an empty range [{}, {}]",
                    spec.name, self.context_id, spec.range_min, spec.range_max
                )));
            }
        }
        Ok(())
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

/// An ordered, validated collection of decision contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub name: String,
    contexts: Vec<DecisionContext>,
}

impl ContextSet {
    pub fn new(name: impl Into<String>, contexts: Vec<DecisionContext>) -> Result<Self> {
        let mut ids = HashSet::new();
        for ctx in &contexts {
            ctx.validate()?;
            if !ids.insert(ctx.context_id.clone()) {
                return Err(Error::domain(format!(
                    "duplicate context_id {}",
                    ctx.context_id
                )));
            }
        }
        Ok(ContextSet {
            name: name.into(),
            contexts,
        })
    }

    /// Accepts a bare array of contexts (named by `name`) or the named form
    /// written by [`ContextSet::to_json`], whose embedded name wins.
    pub fn from_json(name: impl Into<String>, text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Stored {
            Named {
                name: String,
                contexts: Vec<DecisionContext>,
            },
            Bare(Vec<DecisionContext>),
        }
        match serde_json::from_str(text)? {
            Stored::Named { name, contexts } => Self::new(name, contexts),
            Stored::Bare(contexts) => Self::new(name, contexts),
        }
    }

    /// The bundled sets are `original-100` and `transfer-100`.
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "original-100" => ORIGINAL_SET,
            "transfer-100" => TRANSFER_SET,
            _ => return None,
        };
        Some(Self::from_json(name, text).expect("bundled context set is valid"))
    }

    /// Resolves a bundled set name or reads a JSON file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if let Some(set) = Self::builtin(name_or_path) {
            return Ok(set);
        }
        let path = Path::new(name_or_path);
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read context set {name_or_path}: {e}"))
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| name_or_path.to_string());
        Self::from_json(name, &text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&serde_json::json!({
            "name": self.name,
            "contexts": self.contexts,
        }))
        .expect("contexts serialize");
        s.push('\n');
        s
    }

    pub fn contexts(&self) -> &[DecisionContext] {
        &self.contexts
    }

    pub fn get(&self, context_id: &str) -> Option<&DecisionContext> {
        self.contexts.iter().find(|c| c.context_id == context_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.contexts.iter().map(|c| c.context_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn subset(&self, name: impl Into<String>, ids: &[String]) -> Result<Self> {
        let contexts = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::config(format!("unknown context_id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, contexts)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DecisionContext> {
        self.contexts.iter()
    }
}

impl<'a> IntoIterator for &'a ContextSet {
    type Item = &'a DecisionContext;
    type IntoIter = std::slice::Iter<'a, DecisionContext>;

    fn into_iter(self) -> Self::IntoIter {
        self.contexts.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRole {
    #[default]
    Target,
    Learned,
    Reported,
}

/// Five signed attribute weights keyed by attribute name.
///
/// Serializes as a bare `{attribute: weight}` object; the role is carried by
/// the file the vector lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector {
    pub entries: IndexMap<String, f64>,
    #[serde(skip)]
    pub role: WeightRole,
}

impl WeightVector {
    pub fn from_values(context: &DecisionContext, values: &[f64], role: WeightRole) -> Self {
        debug_assert_eq!(values.len(), context.attributes.len());
        let entries = context
            .attributes
            .iter()
            .zip(values)
            .map(|(a, v)| (a.name.clone(), *v))
            .collect();
        WeightVector { entries, role }
    }

    pub fn with_role(mut self, role: WeightRole) -> Self {
        self.role = role;
        self
    }

    /// Weights in the context's attribute order.
    pub fn values_for(&self, context: &DecisionContext) -> Result<[f64; ATTRIBUTE_COUNT]> {
        keyed_values(&self.entries, context, "weight vector")
    }

    pub fn validate(&self, context: &DecisionContext) -> Result<()> {
        let values = self.values_for(context)?;
        if self.role == WeightRole::Target {
            if let Some(v) = values
                .iter()
                .find(|v| !v.is_finite() || v.abs() > WEIGHT_LIMIT)
            {
                return Err(Error::domain(format!(
                    "target weight {v} for context {} outside [-100, 100]",
                    context.context_id
                )));
            }
        }
        Ok(())
    }
}

/// Weight vectors for a whole context set, keyed by context id.
pub type WeightTable = IndexMap<String, WeightVector>;

pub fn read_weight_table(path: &Path, role: WeightRole) -> Result<WeightTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read weights {}: {e}", path.display())))?;
    let mut table: WeightTable = serde_json::from_str(&text)?;
    for w in table.values_mut() {
        w.role = role;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OptionProfile {
    pub values: IndexMap<String, f64>,
}

impl OptionProfile {
    pub fn from_values(context: &DecisionContext, values: &[f64]) -> Self {
        let values = context
            .attributes
            .iter()
            .zip(values)
            .map(|(a, v)| (a.name.clone(), *v))
            .collect();
        OptionProfile { values }
    }

    pub fn values_for(&self, context: &DecisionContext) -> Result<[f64; ATTRIBUTE_COUNT]> {
        keyed_values(&self.values, context, "option")
    }

    pub fn validate(&self, context: &DecisionContext) -> Result<()> {
        let values = self.values_for(context)?;
        for (spec, v) in context.attributes.iter().zip(values) {
            if !spec.contains(v) {
                return Err(Error::domain(format!(
                    "value {v} of attribute {} outside [{}, {}]",
                    spec.name, spec.range_min, spec.range_max
                )));
            }
        }
        Ok(())
    }
}

fn keyed_values(
    map: &IndexMap<String, f64>,
    context: &DecisionContext,
    what: &str,
) -> Result<[f64; ATTRIBUTE_COUNT]> {
    if map.len() != context.attributes.len() {
        return Err(Error::domain(format!(
            "{what} has {} entries but context {} has {} attributes",
            map.len(),
            context.context_id,
            context.attributes.len()
        )));
    }
    let mut out = [0.0; ATTRIBUTE_COUNT];
    for (slot, spec) in out.iter_mut().zip(&context.attributes) {
        *slot = *map.get(&spec.name).ok_or_else(|| {
            Error::domain(format!(
                "{what} is missing attribute {} of context {}",
                spec.name, context.context_id
            ))
        })?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoicePair {
    pub context_id: String,
    pub pair_id: u64,
    pub option_a: OptionProfile,
    pub option_b: OptionProfile,
}

impl ChoicePair {
    pub fn validate(&self, context: &DecisionContext) -> Result<()> {
        if self.context_id != context.context_id {
            return Err(Error::domain(format!(
                "pair belongs to {} but was used with {}",
                self.context_id, context.context_id
            )));
        }
        self.option_a.validate(context)?;
        self.option_b.validate(context)
    }

    pub fn swapped(&self) -> ChoicePair {
        ChoicePair {
            context_id: self.context_id.clone(),
            pair_id: self.pair_id,
            option_a: self.option_b.clone(),
            option_b: self.option_a.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Selection {
    A,
    B,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::A => "A",
            Selection::B => "B",
        }
    }

    /// Strict response alphabet: exactly `A` or `B` after trimming whitespace.
    pub fn parse_response(text: &str) -> Option<Selection> {
        match text.trim() {
            "A" => Some(Selection::A),
            "B" => Some(Selection::B),
            _ => None,
        }
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Draws five target weights uniformly on [-100, 100].
pub fn sample_weights(seed: Seed, context: &DecisionContext) -> WeightVector {
    let mut rng = seed.derive("weights", &context.context_id, 0).rng();
    let values: Vec<f64> = context
        .attributes
        .iter()
        .map(|_| rng.random_range(-WEIGHT_LIMIT..=WEIGHT_LIMIT))
        .collect();
    WeightVector::from_values(context, &values, WeightRole::Target)
}

pub fn sample_weight_table(seed: Seed, contexts: &ContextSet) -> WeightTable {
    contexts
        .iter()
        .map(|c| (c.context_id.clone(), sample_weights(seed, c)))
        .collect()
}

pub fn normalize_value(value: f64, spec: &AttributeSpec) -> Result<f64> {
    if !spec.contains(value) {
        return Err(Error::domain(format!(
            "value {value} of attribute {} outside [{}, {}]",
            spec.name, spec.range_min, spec.range_max
        )));
    }
    Ok((value - spec.range_min) / spec.width())
}

pub fn utility(
    weights: &WeightVector,
    option: &OptionProfile,
    context: &DecisionContext,
) -> Result<f64> {
    let w = weights.values_for(context)?;
    let o = option.values_for(context)?;
    let mut total = 0.0;
    for ((wi, oi), spec) in w.iter().zip(o).zip(&context.attributes) {
        total += wi * normalize_value(oi, spec)?;
    }
    Ok(total)
}

pub fn decide(
    weights: &WeightVector,
    pair: &ChoicePair,
    context: &DecisionContext,
) -> Result<Selection> {
    let ua = utility(weights, &pair.option_a, context)?;
    let ub = utility(weights, &pair.option_b, context)?;
    Ok(if ub > ua { Selection::B } else { Selection::A })
}

fn round_to(value: f64, precision: u32) -> f64 {
    let scale = 10f64.powi(precision as i32);
    (value * scale).round() / scale
}

fn sample_option(rng: &mut impl Rng, context: &DecisionContext) -> OptionProfile {
    let values: Vec<f64> = context
        .attributes
        .iter()
        .map(|spec| {
            let raw = rng.random_range(spec.range_min..=spec.range_max);
            round_to(raw, spec.display_precision).clamp(spec.range_min, spec.range_max)
        })
        .collect();
    OptionProfile::from_values(context, &values)
}

/// Samples an option pair, each value uniform over its range and rounded to
/// the attribute's display precision.
pub fn sample_pair(seed: Seed, context: &DecisionContext, pair_id: u64) -> ChoicePair {
    let mut rng = seed.derive("pair", &context.context_id, pair_id).rng();
    let option_a = sample_option(&mut rng, context);
    let option_b = sample_option(&mut rng, context);
    ChoicePair {
        context_id: context.context_id.clone(),
        pair_id,
        option_a,
        option_b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vacuum() -> DecisionContext {
        ContextSet::builtin("original-100").unwrap().contexts()[0].clone()
    }

    fn weights(ctx: &DecisionContext, v: [f64; 5]) -> WeightVector {
        WeightVector::from_values(ctx, &v, WeightRole::Target)
    }

    fn at_fraction(ctx: &DecisionContext, fr: [f64; 5]) -> OptionProfile {
        let values: Vec<f64> = ctx
            .attributes
            .iter()
            .zip(fr)
            .map(|(a, f)| a.range_min + f * a.width())
            .collect();
        OptionProfile::from_values(ctx, &values)
    }

    #[test]
    fn bundled_sets_load_and_are_disjoint() {
        let orig = ContextSet::builtin("original-100").unwrap();
        let xfer = ContextSet::builtin("transfer-100").unwrap();
        assert_eq!(orig.len(), 100);
        assert_eq!(xfer.len(), 100);
        let ids: HashSet<_> = orig.ids().collect();
        assert!(xfer.ids().all(|id| !ids.contains(id)));
        assert_eq!(orig.contexts()[0].agent_name, "Jason Bourne");
    }

    #[test]
    fn validation_rejects_bad_contexts() {
        let mut ctx = vacuum();
        ctx.attributes.pop();
        assert!(ctx.validate().is_err());

        let mut ctx = vacuum();
        ctx.attributes[1].name = ctx.attributes[0].name.clone();
        assert!(ctx.validate().is_err());

        let mut ctx = vacuum();
        ctx.attributes[2].range_max = ctx.attributes[2].range_min;
        assert!(ctx.validate().is_err());

        let ctx = vacuum();
        assert!(ContextSet::new("dup", vec![ctx.clone(), ctx]).is_err());
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let ctx = vacuum();
        let spec = &ctx.attributes[0];
        assert_eq!(normalize_value(spec.range_min, spec).unwrap(), 0.0);
        assert_eq!(normalize_value(spec.range_max, spec).unwrap(), 1.0);
        let mid = (spec.range_min + spec.range_max) / 2.0;
        assert_eq!(normalize_value(mid, spec).unwrap(), 0.5);
        let err = normalize_value(spec.range_max + 1.0, spec).unwrap_err();
        assert!(err.to_string().contains("suction_power"));
    }

    #[test]
    fn utility_examples() {
        let ctx = vacuum();
        let any = at_fraction(&ctx, [0.3, 0.1, 0.9, 0.5, 0.2]);
        assert_eq!(utility(&weights(&ctx, [0.0; 5]), &any, &ctx).unwrap(), 0.0);

        let top = at_fraction(&ctx, [1.0, 0.0, 0.0, 0.0, 0.0]);
        let w = weights(&ctx, [100.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(utility(&w, &top, &ctx).unwrap(), 100.0);

        let both = at_fraction(&ctx, [1.0, 1.0, 0.4, 0.7, 0.2]);
        let w = weights(&ctx, [50.0, -50.0, 0.0, 0.0, 0.0]);
        assert_eq!(utility(&w, &both, &ctx).unwrap(), 0.0);
    }

    #[test]
    fn utility_rejects_key_mismatch() {
        let ctx = vacuum();
        let mut w = weights(&ctx, [1.0; 5]);
        let (_, v) = w.entries.shift_remove_index(0).unwrap();
        w.entries.insert("color".into(), v);
        let o = at_fraction(&ctx, [0.5; 5]);
        assert!(utility(&w, &o, &ctx).is_err());
    }

    #[test]
    fn decide_dominance_and_ties() {
        let ctx = vacuum();
        let w = weights(&ctx, [40.0, -10.0, 5.0, 0.0, 3.0]);
        let better = at_fraction(&ctx, [0.8, 0.5, 0.5, 0.5, 0.5]);
        let worse = at_fraction(&ctx, [0.2, 0.5, 0.5, 0.5, 0.5]);
        let pair = ChoicePair {
            context_id: ctx.context_id.clone(),
            pair_id: 0,
            option_a: better.clone(),
            option_b: worse.clone(),
        };
        assert_eq!(decide(&w, &pair, &ctx).unwrap(), Selection::A);
        assert_eq!(decide(&w, &pair.swapped(), &ctx).unwrap(), Selection::B);

        let same = ChoicePair {
            option_b: better.clone(),
            ..pair
        };
        assert_eq!(decide(&w, &same, &ctx).unwrap(), Selection::A);
    }

    #[test]
    fn sampled_weights_are_bounded_and_deterministic() {
        let orig = ContextSet::builtin("original-100").unwrap();
        let seed = Seed(11);
        let mut all = Vec::new();
        for ctx in &orig {
            let w = sample_weights(seed, ctx);
            assert_eq!(w, sample_weights(seed, ctx));
            w.validate(ctx).unwrap();
            all.extend(w.values_for(ctx).unwrap());
        }
        for round in 1..20u64 {
            for ctx in &orig {
                all.extend(sample_weights(Seed(round), ctx).values_for(ctx).unwrap());
            }
        }
        assert_eq!(all.len(), 10_000);
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mean.abs() < 3.0, "mean {mean}");
        assert!(min < -95.0 && max > 95.0);
    }

    #[test]
    fn sampled_pairs_are_valid_deterministic_and_cover_range() {
        let ctx = vacuum();
        let seed = Seed(3);
        assert_eq!(sample_pair(seed, &ctx, 4), sample_pair(seed, &ctx, 4));
        assert_ne!(sample_pair(seed, &ctx, 4), sample_pair(seed, &ctx, 5));
        let spec = &ctx.attributes[0];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..5_000 {
            let pair = sample_pair(seed, &ctx, i);
            pair.validate(&ctx).unwrap();
            for o in [&pair.option_a, &pair.option_b] {
                let v = o.values[&spec.name];
                assert_eq!(v, round_to(v, 1));
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let tol = 0.01 * spec.width();
        assert!(lo - spec.range_min <= tol, "min {lo}");
        assert!(spec.range_max - hi <= tol, "max {hi}");
    }

    #[test]
    fn selection_response_alphabet() {
        assert_eq!(Selection::parse_response(" A\n"), Some(Selection::A));
        assert_eq!(Selection::parse_response("B"), Some(Selection::B));
        assert_eq!(Selection::parse_response("a"), None);
        assert_eq!(Selection::parse_response("A."), None);
        assert_eq!(Selection::parse_response(""), None);
    }
}
