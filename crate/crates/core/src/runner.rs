//! Experiment stages over any [`Completer`]: collect choices and reports,
//! recover weights, and correlate weight sets.
//!
//! Nothing here touches the run directory except the crossfold stage, which
//! has to put each fold's training file on disk before a trained backend can
//! be obtained from it.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{complete_batch, Completer, TransportStatus};
use crate::dataset::{emit_introspection_dataset, write_jsonl, FinetuneRecord};
use crate::error::{Error, Result};
use crate::estimation::{compute_diffs, fit_logistic, DiffRow};
use crate::model::{
    sample_pair, ContextSet, OptionProfile, Selection, WeightRole, WeightTable, WeightVector,
};
use crate::prompts::{parse_prompt, render_decision_prompt, render_introspection_prompt};
use crate::report::{parse_report, ReportRecord};
use crate::seed::Seed;
use crate::stats::{
    bootstrap_correlation, correlation_contrast, BootstrapSettings, ContrastMode,
    CorrelationEstimate, PairedRow, PairedWeightSample,
};

/// A stage fails when more than this share of its calls failed in transport.
pub const FAILURE_BUDGET: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallStatus {
    Valid,
    Invalid,
    TransportFailed,
}

/// Per-stage call accounting: `emitted = valid + invalid + transport_failed`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTally {
    pub emitted: u64,
    pub valid: u64,
    pub invalid: u64,
    pub transport_failed: u64,
    /// HTTP attempts including retries.
    pub attempts: u64,
}

impl CallTally {
    fn add(&mut self, status: CallStatus, attempts: u32) {
        self.emitted += 1;
        self.attempts += u64::from(attempts);
        match status {
            CallStatus::Valid => self.valid += 1,
            CallStatus::Invalid => self.invalid += 1,
            CallStatus::TransportFailed => self.transport_failed += 1,
        }
    }

    pub fn reconciles(&self) -> bool {
        self.emitted == self.valid + self.invalid + self.transport_failed
    }

    pub fn merge(&mut self, other: &CallTally) {
        self.emitted += other.emitted;
        self.valid += other.valid;
        self.invalid += other.invalid;
        self.transport_failed += other.transport_failed;
        self.attempts += other.attempts;
    }

    fn check_budget(&self, stage: &str) -> Result<()> {
        if self.transport_failed as f64 > FAILURE_BUDGET * self.emitted as f64 {
            return Err(Error::Transport(format!(
                "{stage}: {} of {} calls failed, above the {:.0}% budget",
                self.transport_failed,
                self.emitted,
                FAILURE_BUDGET * 100.0
            )));
        }
        Ok(())
    }
}

/// One elicited decision, as stored in `choices/*.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub context_id: String,
    pub pair_id: u64,
    pub option_a: OptionProfile,
    pub option_b: OptionProfile,
    /// Range-normalized `a - b`, in the option's attribute order.
    pub diffs: Vec<f64>,
    pub response: String,
    pub selection: Option<Selection>,
    pub status: CallStatus,
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// One elicited report, as stored in `reports/*.jsonl`. Transport failures
/// carry neither a parse nor an invalid reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCall {
    #[serde(flatten)]
    pub record: ReportRecord,
    pub status: CallStatus,
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

pub fn tally_choices(records: &[ChoiceRecord]) -> CallTally {
    let mut t = CallTally::default();
    for r in records {
        t.add(r.status, r.attempt_count);
    }
    t
}

pub fn tally_reports(records: &[ReportCall]) -> CallTally {
    let mut t = CallTally::default();
    for r in records {
        t.add(r.status, r.attempt_count);
    }
    t
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(label: &str, text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Validation {
                path: label.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    from_jsonl(&path.display().to_string(), &text)
}

fn require_count(what: &str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::config(format!("{what} must be at least 1")));
    }
    Ok(())
}

/// Elicits `per_agent` decisions per context, each on its own pair drawn
/// from `seed`, and classifies every response.
pub fn collect_choices(
    backend: &dyn Completer,
    contexts: &ContextSet,
    per_agent: usize,
    seed: Seed,
) -> Result<Vec<ChoiceRecord>> {
    require_count("decisions_per_agent", per_agent)?;
    let mut pairs = Vec::with_capacity(contexts.len() * per_agent);
    let mut prompts = Vec::with_capacity(pairs.capacity());
    for ctx in contexts {
        for i in 0..per_agent as u64 {
            let pair = sample_pair(seed, ctx, i);
            prompts.push(render_decision_prompt(ctx, &pair)?);
            pairs.push((ctx, pair));
        }
    }
    let results = complete_batch(backend, &prompts)?;
    let mut records = Vec::with_capacity(results.len());
    for ((ctx, pair), result) in pairs.into_iter().zip(results) {
        let selection = if result.succeeded() {
            Selection::parse_response(&result.text)
        } else {
            None
        };
        let status = match (result.transport_status, selection) {
            (TransportStatus::Failed, _) => CallStatus::TransportFailed,
            (_, Some(_)) => CallStatus::Valid,
            (_, None) => CallStatus::Invalid,
        };
        records.push(ChoiceRecord {
            context_id: ctx.context_id.clone(),
            pair_id: pair.pair_id,
            diffs: compute_diffs(&pair, ctx)?.to_vec(),
            option_a: pair.option_a,
            option_b: pair.option_b,
            response: result.text,
            selection,
            status,
            attempt_count: result.attempt_count,
            diagnostic: result.diagnostic,
        });
    }
    tally_choices(&records).check_budget("decision elicitation")?;
    Ok(records)
}

/// Elicits `per_agent` introspective reports per context on fresh pairs
/// and parses each one.
pub fn collect_reports(
    backend: &dyn Completer,
    contexts: &ContextSet,
    per_agent: usize,
    seed: Seed,
) -> Result<Vec<ReportCall>> {
    require_count("reports_per_agent", per_agent)?;
    let mut prompts = Vec::with_capacity(contexts.len() * per_agent);
    let mut owners = Vec::with_capacity(prompts.capacity());
    for ctx in contexts {
        for i in 0..per_agent as u64 {
            let pair = sample_pair(seed, ctx, i);
            prompts.push(render_introspection_prompt(ctx, &pair)?);
            owners.push((ctx, i));
        }
    }
    let results = complete_batch(backend, &prompts)?;
    let calls: Vec<ReportCall> = owners
        .into_iter()
        .zip(results)
        .map(|((ctx, trial), result)| {
            if result.succeeded() {
                let record = parse_report(&result.text, ctx).with_trial(trial);
                let status = if record.is_valid() {
                    CallStatus::Valid
                } else {
                    CallStatus::Invalid
                };
                ReportCall {
                    record,
                    status,
                    attempt_count: result.attempt_count,
                    diagnostic: result.diagnostic,
                }
            } else {
                ReportCall {
                    record: ReportRecord {
                        context_id: ctx.context_id.clone(),
                        trial_index: trial,
                        raw_text: String::new(),
                        parsed: None,
                        invalid_reason: None,
                        clamped: Vec::new(),
                    },
                    status: CallStatus::TransportFailed,
                    attempt_count: result.attempt_count,
                    diagnostic: result.diagnostic,
                }
            }
        })
        .collect();
    tally_reports(&calls).check_budget("report elicitation")?;
    Ok(calls)
}

/// Recovered weights for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedEntry {
    pub weights: WeightVector,
    pub standard_errors: IndexMap<String, f64>,
    pub converged: bool,
    pub rows: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LearnedWeights {
    pub entries: IndexMap<String, LearnedEntry>,
    /// Contexts without a single valid choice.
    pub excluded: Vec<String>,
}

impl LearnedWeights {
    pub fn table(&self) -> WeightTable {
        self.entries
            .iter()
            .map(|(id, e)| (id.clone(), e.weights.clone()))
            .collect()
    }

    /// `{context_id: {attribute: slope, attribute_se: se, converged: bool}}`.
    pub fn to_json(&self) -> String {
        let mut root = serde_json::Map::new();
        for (id, e) in &self.entries {
            let mut obj = serde_json::Map::new();
            for (name, w) in &e.weights.entries {
                obj.insert(name.clone(), Value::from(*w));
                obj.insert(format!("{name}_se"), Value::from(e.standard_errors[name]));
            }
            obj.insert("converged".into(), Value::Bool(e.converged));
            root.insert(id.clone(), Value::Object(obj));
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(root)).expect("json");
        text.push('\n');
        text
    }

    /// Reads a learned-weights file, taking attribute names from `contexts`.
    pub fn from_json(text: &str, contexts: &ContextSet) -> Result<Self> {
        let root: IndexMap<String, IndexMap<String, Value>> = serde_json::from_str(text)?;
        let mut entries = IndexMap::new();
        for (id, obj) in root {
            let ctx = contexts
                .get(&id)
                .ok_or_else(|| Error::config(format!("learned weights name unknown context {id}")))?;
            let number = |key: &str| {
                obj.get(key).and_then(Value::as_f64).ok_or_else(|| {
                    Error::config(format!("learned weights for {id} lack numeric {key}"))
                })
            };
            let mut values = Vec::new();
            let mut standard_errors = IndexMap::new();
            for name in ctx.attribute_names() {
                values.push(number(name)?);
                standard_errors.insert(name.to_string(), number(&format!("{name}_se"))?);
            }
            let converged = obj.get("converged").and_then(Value::as_bool).unwrap_or(false);
            entries.insert(
                id.clone(),
                LearnedEntry {
                    weights: WeightVector::from_values(ctx, &values, WeightRole::Learned),
                    standard_errors,
                    converged,
                    rows: 0,
                },
            );
        }
        Ok(LearnedWeights {
            entries,
            excluded: Vec::new(),
        })
    }
}

/// Fits the penalized logistic model per context on its valid choices.
/// Attribute names come from the records themselves, so a choices file is
/// all this needs.
pub fn estimate_weights(records: &[ChoiceRecord], prior_sd: f64) -> Result<LearnedWeights> {
    let mut groups: IndexMap<&str, Vec<&ChoiceRecord>> = IndexMap::new();
    for r in records {
        groups.entry(r.context_id.as_str()).or_default().push(r);
    }
    let mut out = LearnedWeights::default();
    for (id, mut group) in groups {
        group.sort_by_key(|r| r.pair_id);
        let names: Vec<String> = group[0].option_a.values.keys().cloned().collect();
        let rows: Vec<DiffRow> = group
            .iter()
            .filter(|r| r.status == CallStatus::Valid)
            .filter_map(|r| {
                r.selection.map(|s| DiffRow {
                    d: r.diffs.clone(),
                    selected_a: s == Selection::A,
                })
            })
            .collect();
        if rows.is_empty() {
            log::warn!("context {id} has no valid choices; excluded from estimation");
            out.excluded.push(id.to_string());
            continue;
        }
        if rows.iter().any(|r| r.d.len() != names.len()) {
            return Err(Error::domain(format!(
                "choices for {id} disagree on the number of attributes"
            )));
        }
        let fit = fit_logistic(&rows, prior_sd)?;
        if !fit.converged {
            log::warn!(
                "fit for {id} stopped after {} iterations with gradient {:.3e}",
                fit.iterations,
                fit.final_gradient_norm
            );
        }
        let entries = names.iter().cloned().zip(fit.slopes().iter().copied()).collect();
        let standard_errors = names.iter().cloned().zip(fit.slope_errors().iter().copied()).collect();
        out.entries.insert(
            id.to_string(),
            LearnedEntry {
                weights: WeightVector {
                    entries,
                    role: WeightRole::Learned,
                },
                standard_errors,
                converged: fit.converged,
                rows: rows.len(),
            },
        );
    }
    Ok(out)
}

/// How repeated reports for one context are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Mean,
    Median,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Combines valid reports per context. Contexts without a valid report are
/// returned separately instead of being averaged.
pub fn average_reports(
    contexts: &ContextSet,
    reports: &[ReportCall],
    averaging: Averaging,
) -> Result<(WeightTable, Vec<String>)> {
    let mut by_context: IndexMap<&str, Vec<[f64; 5]>> = IndexMap::new();
    for r in reports {
        if let Some(parsed) = &r.record.parsed {
            let ctx = contexts.get(&r.record.context_id).ok_or_else(|| {
                Error::config(format!("report for unknown context {}", r.record.context_id))
            })?;
            by_context
                .entry(r.record.context_id.as_str())
                .or_default()
                .push(parsed.values_for(ctx)?);
        }
    }
    let mut table = WeightTable::new();
    let mut excluded = Vec::new();
    for ctx in contexts {
        let Some(vectors) = by_context.get(ctx.context_id.as_str()) else {
            excluded.push(ctx.context_id.clone());
            continue;
        };
        let values: Vec<f64> = (0..ctx.attributes.len())
            .map(|i| {
                let mut column: Vec<f64> = vectors.iter().map(|v| v[i]).collect();
                match averaging {
                    Averaging::Mean => column.iter().sum::<f64>() / column.len() as f64,
                    Averaging::Median => median(&mut column),
                }
            })
            .collect();
        table.insert(
            ctx.context_id.clone(),
            WeightVector::from_values(ctx, &values, WeightRole::Reported),
        );
    }
    Ok((table, excluded))
}

/// Context ids, in set order, present in every table.
pub fn common_ids(contexts: &ContextSet, tables: &[&WeightTable]) -> Vec<String> {
    contexts
        .ids()
        .filter(|id| tables.iter().all(|t| t.contains_key(*id)))
        .map(str::to_string)
        .collect()
}

/// Rows `(x, y)` for every attribute of the listed contexts.
pub fn paired_sample(
    contexts: &ContextSet,
    ids: &[String],
    x: &WeightTable,
    y: &WeightTable,
    model: &str,
    trained: bool,
) -> Result<PairedWeightSample> {
    let mut rows = Vec::with_capacity(ids.len() * 5);
    for id in ids {
        let ctx = contexts
            .get(id)
            .ok_or_else(|| Error::config(format!("unknown context_id {id}")))?;
        let missing = || Error::domain(format!("weights for {id} missing from a table"));
        let xs = x.get(id).ok_or_else(missing)?.values_for(ctx)?;
        let ys = y.get(id).ok_or_else(missing)?.values_for(ctx)?;
        for (spec, (xv, yv)) in ctx.attributes.iter().zip(xs.iter().zip(&ys)) {
            rows.push(PairedRow {
                x: *xv,
                y: *yv,
                context_id: id.clone(),
                attribute: spec.name.clone(),
                model: model.to_string(),
                trained,
            });
        }
    }
    Ok(PairedWeightSample::new(rows))
}

/// Correlation of two tables over the contexts both cover.
pub fn correlate_tables(
    contexts: &ContextSet,
    x: &WeightTable,
    y: &WeightTable,
    settings: BootstrapSettings,
    seed: Seed,
) -> Result<CorrelationEstimate> {
    let ids = common_ids(contexts, &[x, y]);
    let sample = paired_sample(contexts, &ids, x, y, "", false)?;
    bootstrap_correlation(&sample, settings, seed)
}

/// Before, after and paired contrast of `before` vs `reference` and `after`
/// vs `reference`, restricted to contexts all three tables cover.
pub fn before_after(
    contexts: &ContextSet,
    reference: &WeightTable,
    before: &WeightTable,
    after: &WeightTable,
    settings: BootstrapSettings,
    seed: Seed,
) -> Result<[CorrelationEstimate; 3]> {
    let ids = common_ids(contexts, &[reference, before, after]);
    let a = paired_sample(contexts, &ids, before, reference, "", false)?;
    let b = paired_sample(contexts, &ids, after, reference, "", true)?;
    Ok([
        bootstrap_correlation(&a, settings, seed.derive("condition", "before", 0))?,
        bootstrap_correlation(&b, settings, seed.derive("condition", "after", 0))?,
        correlation_contrast(&a, &b, ContrastMode::Paired, settings, seed.derive("condition", "contrast", 0))?,
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    VerifyPreferences,
    ElicitReports,
    CrossfoldIntrospection,
    NativeGeneralization,
}

/// Protocol parameters for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub kind: StageKind,
    pub decisions_per_agent: usize,
    pub reports_per_agent: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<[Vec<String>; 2]>,
}

impl StagePlan {
    pub fn validate(&self, contexts: &ContextSet) -> Result<()> {
        require_count("decisions_per_agent", self.decisions_per_agent)?;
        require_count("reports_per_agent", self.reports_per_agent)?;
        if let Some(folds) = &self.folds {
            check_partition(contexts, folds)?;
        }
        Ok(())
    }
}

/// First half of the set trains fold one, second half fold two.
pub fn two_folds(contexts: &ContextSet) -> Result<[Vec<String>; 2]> {
    if contexts.len() < 2 {
        return Err(Error::config("two-fold split needs at least 2 contexts"));
    }
    let ids: Vec<String> = contexts.ids().map(str::to_string).collect();
    let half = ids.len() / 2;
    Ok([ids[..half].to_vec(), ids[half..].to_vec()])
}

pub fn check_partition(contexts: &ContextSet, folds: &[Vec<String>; 2]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for id in folds.iter().flatten() {
        if contexts.get(id).is_none() {
            return Err(Error::config(format!("fold names unknown context {id}")));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::domain(format!("context {id} appears in both folds")));
        }
    }
    if seen.len() != contexts.len() {
        return Err(Error::domain("folds do not cover every context"));
    }
    Ok(())
}

/// Fails if any record in a training file renders one of `held_out`.
pub fn check_no_leakage(
    records: &[FinetuneRecord],
    contexts: &ContextSet,
    held_out: &[String],
) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        let (_, ctx) = parse_prompt(r.system(), r.user(), contexts, 0)?;
        if held_out.contains(&ctx.context_id) {
            return Err(Error::Integrity(format!(
                "fold leakage: training record {} renders held-out context {}",
                i + 1,
                ctx.context_id
            )));
        }
    }
    Ok(())
}

/// A backend after introspection training, with a note of how it was made.
pub struct TrainedBackend {
    pub backend: Box<dyn Completer>,
    pub provenance: Value,
}

/// Produces backends for the experiment: the preference-trained base and
/// introspection-trained variants.
pub trait BackendFactory {
    fn describe(&self) -> Value;

    /// Called once with the preference dataset before any elicitation.
    fn instill(&mut self, _dataset: &Path) -> Result<Value> {
        Ok(Value::Null)
    }

    fn base(&self) -> Result<Box<dyn Completer>>;

    /// A backend trained on the introspection `dataset`; `label` names the
    /// fold.
    fn trained(&self, label: &str, dataset: &Path) -> Result<TrainedBackend>;
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub choices: Vec<ChoiceRecord>,
    pub learned: LearnedWeights,
    pub estimate: CorrelationEstimate,
}

pub fn run_verify_preferences(
    backend: &dyn Completer,
    contexts: &ContextSet,
    targets: &WeightTable,
    decisions_per_agent: usize,
    prior_sd: f64,
    settings: BootstrapSettings,
    seed: Seed,
) -> Result<VerifyOutcome> {
    let choices = collect_choices(backend, contexts, decisions_per_agent, seed.stream("verify-choices"))?;
    let learned = estimate_weights(&choices, prior_sd)?;
    let estimate = correlate_tables(contexts, targets, &learned.table(), settings, seed.stream("verify-bootstrap"))?;
    Ok(VerifyOutcome {
        choices,
        learned,
        estimate,
    })
}

#[derive(Debug, Clone)]
pub struct ElicitOutcome {
    pub reports: Vec<ReportCall>,
    pub reported: WeightTable,
    pub excluded: Vec<String>,
}

/// `seed` picks the pairs shown; pass the same seed to two backends to show
/// them identical prompts.
pub fn run_elicit_reports(
    backend: &dyn Completer,
    contexts: &ContextSet,
    reports_per_agent: usize,
    averaging: Averaging,
    seed: Seed,
) -> Result<ElicitOutcome> {
    let reports = collect_reports(backend, contexts, reports_per_agent, seed)?;
    let (reported, excluded) = average_reports(contexts, &reports, averaging)?;
    if !excluded.is_empty() {
        log::warn!("{} contexts had no valid report: {}", excluded.len(), excluded.join(", "));
    }
    Ok(ElicitOutcome {
        reports,
        reported,
        excluded,
    })
}

#[derive(Debug, Clone)]
pub struct CrossfoldOutcome {
    pub folds: [Vec<String>; 2],
    pub datasets: Vec<PathBuf>,
    pub provenance: Vec<Value>,
    /// Held-out reports from both folds, pooled.
    pub after: ElicitOutcome,
}

/// Trains on each half's introspection data and elicits reports on the
/// other half, then pools the two held-out sets.
#[allow(clippy::too_many_arguments)]
pub fn run_crossfold_introspection(
    factory: &dyn BackendFactory,
    contexts: &ContextSet,
    targets: &WeightTable,
    reports_per_agent: usize,
    averaging: Averaging,
    seed: Seed,
    dataset_dir: &Path,
) -> Result<CrossfoldOutcome> {
    let folds = two_folds(contexts)?;
    check_partition(contexts, &folds)?;
    std::fs::create_dir_all(dataset_dir)?;
    let mut datasets = Vec::new();
    let mut provenance = Vec::new();
    let mut reports = Vec::new();
    for (k, (train, test)) in [(&folds[0], &folds[1]), (&folds[1], &folds[0])].into_iter().enumerate() {
        let label = format!("fold{}", k + 1);
        let train_set = contexts.subset(format!("{label}-train"), train)?;
        let test_set = contexts.subset(format!("{label}-test"), test)?;
        let records = emit_introspection_dataset(&train_set, targets, seed)?;
        check_no_leakage(&records, contexts, test)?;
        let path = dataset_dir.join(format!("introspection-{label}.jsonl"));
        write_jsonl(&path, &records)?;
        let trained = factory.trained(&label, &path)?;
        let outcome = run_elicit_reports(
            trained.backend.as_ref(),
            &test_set,
            reports_per_agent,
            averaging,
            seed.stream("reports"),
        )?;
        reports.extend(outcome.reports);
        datasets.push(path);
        provenance.push(trained.provenance);
    }
    let (reported, excluded) = average_reports(contexts, &reports, averaging)?;
    Ok(CrossfoldOutcome {
        folds,
        datasets,
        provenance,
        after: ElicitOutcome {
            reports,
            reported,
            excluded,
        },
    })
}

#[derive(Debug, Clone)]
pub struct NativeOutcome {
    pub choices: Vec<ChoiceRecord>,
    pub learned: LearnedWeights,
    pub before: ElicitOutcome,
    pub after: ElicitOutcome,
    /// Reported-vs-learned before, after, and `after - before`.
    pub estimates: [CorrelationEstimate; 3],
}

/// Fails when a transfer context id also names a training context.
pub fn check_disjoint(transfer: &ContextSet, original: &ContextSet) -> Result<()> {
    let overlap: Vec<&str> = transfer.ids().filter(|id| original.get(id).is_some()).collect();
    if !overlap.is_empty() {
        return Err(Error::Integrity(format!(
            "transfer contexts overlap the training set: {}",
            overlap.join(", ")
        )));
    }
    Ok(())
}

/// Recovers native weights on unseen contexts and scores reports about
/// them before and after introspection training.
#[allow(clippy::too_many_arguments)]
pub fn run_native_generalization(
    before: &dyn Completer,
    after: &dyn Completer,
    transfer: &ContextSet,
    original: &ContextSet,
    decisions_per_agent: usize,
    reports_per_agent: usize,
    averaging: Averaging,
    prior_sd: f64,
    settings: BootstrapSettings,
    seed: Seed,
) -> Result<NativeOutcome> {
    check_disjoint(transfer, original)?;
    require_count("reports_per_agent", reports_per_agent)?;
    let choices = collect_choices(before, transfer, decisions_per_agent, seed.stream("native-choices"))?;
    let learned = estimate_weights(&choices, prior_sd)?;
    let pairs = seed.stream("native-reports");
    let rb = run_elicit_reports(before, transfer, reports_per_agent, averaging, pairs)?;
    let ra = run_elicit_reports(after, transfer, reports_per_agent, averaging, pairs)?;
    let estimates = before_after(
        transfer,
        &learned.table(),
        &rb.reported,
        &ra.reported,
        settings,
        seed.stream("native-bootstrap"),
    )?;
    Ok(NativeOutcome {
        choices,
        learned,
        before: rb,
        after: ra,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CompletionResult, SyntheticBackend};
    use crate::model::sample_weight_table;
    use crate::prompts::PromptBundle;
    use crate::subject::SubjectConfig;

    fn setup(n: usize) -> (ContextSet, WeightTable) {
        let all = ContextSet::builtin("original-100").unwrap();
        let ids: Vec<String> = all.ids().take(n).map(str::to_string).collect();
        let contexts = all.subset("small", &ids).unwrap();
        let targets = sample_weight_table(Seed(11), &contexts);
        (contexts, targets)
    }

    #[test]
    fn noiseless_reports_average_to_latent() {
        let (contexts, targets) = setup(12);
        let b = SyntheticBackend::new(SubjectConfig::new(targets.clone()), contexts.clone(), Seed(1)).unwrap();
        let out = run_elicit_reports(&b, &contexts, 10, Averaging::Mean, Seed(2)).unwrap();
        assert!(out.excluded.is_empty());
        for ctx in &contexts {
            let got = out.reported[&ctx.context_id].values_for(ctx).unwrap();
            let want = targets[&ctx.context_id].values_for(ctx).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w}");
            }
        }
        assert!(tally_reports(&out.reports).reconciles());
    }

    #[test]
    fn invalid_rate_matches_binomial() {
        let all = ContextSet::builtin("original-100").unwrap();
        let targets = sample_weight_table(Seed(11), &all);
        let mut subject = SubjectConfig::new(targets);
        subject.invalid_report_rate = 0.3;
        let b = SyntheticBackend::new(subject, all.clone(), Seed(4)).unwrap();
        let out = run_elicit_reports(&b, &all, 10, Averaging::Mean, Seed(5)).unwrap();
        let t = tally_reports(&out.reports);
        let (n, p) = (1000.0_f64, 0.7_f64);
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((t.valid as f64 - n * p).abs() <= 3.0 * sd, "valid {}", t.valid);
        assert_eq!(t.valid + t.invalid, 1000);
    }

    struct Garbage;

    impl Completer for Garbage {
        fn complete(&self, _: &PromptBundle) -> Result<CompletionResult> {
            Ok(CompletionResult {
                text: "I would rather not say.".into(),
                latency_secs: 0.0,
                attempt_count: 1,
                transport_status: TransportStatus::Ok,
                diagnostic: None,
            })
        }

        fn describe(&self) -> Value {
            Value::Null
        }
    }

    struct Down;

    impl Completer for Down {
        fn complete(&self, _: &PromptBundle) -> Result<CompletionResult> {
            Ok(CompletionResult {
                text: String::new(),
                latency_secs: 0.0,
                attempt_count: 6,
                transport_status: TransportStatus::Failed,
                diagnostic: Some("HTTP 503".into()),
            })
        }

        fn describe(&self) -> Value {
            Value::Null
        }
    }

    #[test]
    fn all_invalid_context_is_excluded_and_named() {
        let (contexts, _) = setup(3);
        let out = run_elicit_reports(&Garbage, &contexts, 4, Averaging::Mean, Seed(2)).unwrap();
        assert_eq!(out.excluded, contexts.ids().map(str::to_string).collect::<Vec<_>>());
        assert!(out.reported.is_empty());
    }

    #[test]
    fn failing_backend_fails_the_stage() {
        let (contexts, _) = setup(3);
        assert!(matches!(
            collect_choices(&Down, &contexts, 5, Seed(1)),
            Err(Error::Transport(_))
        ));
    }

    #[test]
    fn zero_decisions_is_rejected() {
        let (contexts, targets) = setup(3);
        let b = SyntheticBackend::new(SubjectConfig::new(targets.clone()), contexts.clone(), Seed(1)).unwrap();
        assert!(matches!(
            run_verify_preferences(&b, &contexts, &targets, 0, 1.0, BootstrapSettings::default(), Seed(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn learned_file_round_trips() {
        let (contexts, targets) = setup(4);
        let b = SyntheticBackend::new(SubjectConfig::new(targets), contexts.clone(), Seed(1)).unwrap();
        let choices = collect_choices(&b, &contexts, 30, Seed(3)).unwrap();
        let learned = estimate_weights(&choices, 1.0).unwrap();
        let back = LearnedWeights::from_json(&learned.to_json(), &contexts).unwrap();
        assert_eq!(back.table(), learned.table());
        let text = learned.to_json();
        let v: Value = serde_json::from_str(&text).unwrap();
        let first = &v[contexts.contexts()[0].context_id.as_str()];
        assert!(first["suction_power_se"].as_f64().unwrap() > 0.0);
        assert_eq!(first["converged"], Value::Bool(true));
    }

    #[test]
    fn folds_partition_and_leakage_is_caught() {
        let (contexts, targets) = setup(10);
        let folds = two_folds(&contexts).unwrap();
        assert_eq!(folds[0].len() + folds[1].len(), 10);
        assert!(folds[0].iter().all(|id| !folds[1].contains(id)));
        check_partition(&contexts, &folds).unwrap();
        let records = emit_introspection_dataset(&contexts, &targets, Seed(1)).unwrap();
        assert!(matches!(
            check_no_leakage(&records, &contexts, &folds[1]),
            Err(Error::Integrity(_))
        ));
        let train = contexts.subset("t", &folds[0]).unwrap();
        let ok = emit_introspection_dataset(&train, &targets, Seed(1)).unwrap();
        check_no_leakage(&ok, &contexts, &folds[1]).unwrap();
    }

    #[test]
    fn overlapping_transfer_set_is_refused() {
        let (contexts, _) = setup(5);
        assert!(matches!(check_disjoint(&contexts, &contexts), Err(Error::Integrity(_))));
        let transfer = ContextSet::builtin("transfer-100").unwrap();
        check_disjoint(&transfer, &ContextSet::builtin("original-100").unwrap()).unwrap();
    }

    #[test]
    fn median_is_the_middle() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
