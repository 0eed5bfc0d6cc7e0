//! The analysis report: correlations between weight sets with bootstrap
//! HDIs, before/after contrasts, and call tallies, built only from files in
//! a run directory.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::manifest::layout;
use crate::model::{read_weight_table, ContextSet, WeightRole, WeightTable};
use crate::runner::{
    common_ids, paired_sample, read_records, tally_choices, tally_reports, CallTally, ChoiceRecord,
    LearnedWeights, ReportCall,
};
use crate::seed::Seed;
use crate::stats::{
    bootstrap_correlation, correlation_contrast, BootstrapSettings, ContrastMode, CorrelationEstimate,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub context_set: String,
    pub x: String,
    pub y: String,
    pub contexts: usize,
    pub estimate: CorrelationEstimate,
}

/// `r(after, reference) - r(before, reference)` over shared rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub context_set: String,
    pub reference: String,
    pub before: String,
    pub after: String,
    pub mode: ContrastMode,
    pub contexts: usize,
    pub estimate: CorrelationEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool_version: String,
    pub seed: Seed,
    pub draws: usize,
    pub mass: f64,
    pub correlations: IndexMap<String, Correlation>,
    pub contrasts: IndexMap<String, Contrast>,
    /// Per elicitation file.
    pub tallies: IndexMap<String, CallTally>,
    /// Per weight file: contexts of the set that it does not cover.
    pub excluded: IndexMap<String, Vec<String>>,
    /// Per learned-weights file: contexts whose fit did not converge.
    pub unconverged: IndexMap<String, Vec<String>>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str("# Self-report accuracy\n\n");
        out.push_str(&format!(
            "Seed {}; {} Bayesian-bootstrap draws; {:.0}% highest-density intervals.\n\n",
            self.seed.0,
            self.draws,
            self.mass * 100.0
        ));
        if !self.correlations.is_empty() {
            out.push_str("## Correlations\n\n");
            out.push_str("| condition | set | x | y | contexts | r | HDI low | HDI high |\n");
            out.push_str("|---|---|---|---|---:|---:|---:|---:|\n");
            for (name, c) in &self.correlations {
                out.push_str(&format!(
                    "| {name} | {} | {} | {} | {} | {:.3} | {:.3} | {:.3} |\n",
                    c.context_set, c.x, c.y, c.contexts, c.estimate.point_r, c.estimate.hdi_low, c.estimate.hdi_high
                ));
            }
            out.push('\n');
        }
        if !self.contrasts.is_empty() {
            out.push_str("## Training effects\n\n");
            out.push_str("| contrast | set | reference | before | after | contexts | change in r | HDI low | HDI high |\n");
            out.push_str("|---|---|---|---|---|---:|---:|---:|---:|\n");
            for (name, c) in &self.contrasts {
                out.push_str(&format!(
                    "| {name} | {} | {} | {} | {} | {} | {:+.3} | {:+.3} | {:+.3} |\n",
                    c.context_set,
                    c.reference,
                    c.before,
                    c.after,
                    c.contexts,
                    c.estimate.point_r,
                    c.estimate.hdi_low,
                    c.estimate.hdi_high
                ));
            }
            out.push('\n');
        }
        if !self.tallies.is_empty() {
            out.push_str("## Calls\n\n");
            out.push_str("| file | emitted | valid | invalid | transport failed | attempts |\n");
            out.push_str("|---|---:|---:|---:|---:|---:|\n");
            for (file, t) in &self.tallies {
                out.push_str(&format!(
                    "| {file} | {} | {} | {} | {} | {} |\n",
                    t.emitted, t.valid, t.invalid, t.transport_failed, t.attempts
                ));
            }
            out.push('\n');
        }
        let excluded: Vec<_> = self.excluded.iter().filter(|(_, v)| !v.is_empty()).collect();
        if !excluded.is_empty() {
            out.push_str("## Excluded contexts\n\n");
            for (file, ids) in excluded {
                out.push_str(&format!("- {file}: {}\n", ids.join(", ")));
            }
            out.push('\n');
        }
        out
    }
}

/// The report plus the retained bootstrap draws of every estimate.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub report: AnalysisReport,
    pub draws: IndexMap<String, Vec<f64>>,
}

impl Analysis {
    pub fn draws_json(&self) -> String {
        let mut s = serde_json::to_string(&self.draws).expect("draws serialize");
        s.push('\n');
        s
    }
}

struct Tables {
    set: ContextSet,
    reference_name: &'static str,
    reference: Option<WeightTable>,
}

fn load_set(run_dir: &Path, rel: &str) -> Result<Option<ContextSet>> {
    let path = run_dir.join(rel);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)?;
    Ok(Some(ContextSet::from_json(rel, &text)?))
}

fn load_table(run_dir: &Path, rel: &str, role: WeightRole) -> Result<Option<WeightTable>> {
    let path = run_dir.join(rel);
    if !path.exists() {
        return Ok(None);
    }
    read_weight_table(&path, role).map(Some)
}

fn load_learned(
    run_dir: &Path,
    rel: &str,
    set: &ContextSet,
    unconverged: &mut IndexMap<String, Vec<String>>,
) -> Result<Option<WeightTable>> {
    let path = run_dir.join(rel);
    if !path.exists() {
        return Ok(None);
    }
    let learned = LearnedWeights::from_json(&std::fs::read_to_string(&path)?, set)?;
    unconverged.insert(
        rel.to_string(),
        learned
            .entries
            .iter()
            .filter(|(_, e)| !e.converged)
            .map(|(id, _)| id.clone())
            .collect(),
    );
    Ok(Some(learned.table()))
}

fn tally_dir(run_dir: &Path, dir: &str, out: &mut IndexMap<String, CallTally>) -> Result<()> {
    let path = run_dir.join(dir);
    let Ok(entries) = std::fs::read_dir(&path) else {
        return Ok(());
    };
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| n.ends_with(".jsonl") && !n.starts_with('.'))
        .collect();
    names.sort();
    for name in names {
        let rel = format!("{dir}/{name}");
        let tally = if dir == "choices" {
            tally_choices(&read_records::<ChoiceRecord>(&run_dir.join(&rel))?)
        } else {
            tally_reports(&read_records::<ReportCall>(&run_dir.join(&rel))?)
        };
        out.insert(rel, tally);
    }
    Ok(())
}

/// Builds the report from whatever weight files the run directory holds;
/// conditions whose inputs are missing are left out.
pub fn analyze_run(run_dir: &Path, settings: BootstrapSettings, seed: Seed) -> Result<Analysis> {
    let stream = seed.stream("analysis");
    let mut report = AnalysisReport {
        tool_version: crate::manifest::TOOL_VERSION.to_string(),
        seed,
        draws: settings.draws,
        mass: settings.mass,
        correlations: IndexMap::new(),
        contrasts: IndexMap::new(),
        tallies: IndexMap::new(),
        excluded: IndexMap::new(),
        unconverged: IndexMap::new(),
    };
    let mut draws = IndexMap::new();

    let mut groups = Vec::new();
    if let Some(set) = load_set(run_dir, layout::ORIGINAL_CONTEXTS)? {
        let learned = load_learned(run_dir, layout::LEARNED, &set, &mut report.unconverged)?;
        let targets = load_table(run_dir, layout::TARGETS, WeightRole::Target)?;
        let base = load_table(run_dir, layout::REPORTED_BASE, WeightRole::Reported)?;
        let trained = load_table(run_dir, layout::REPORTED_TRAINED, WeightRole::Reported)?;
        let mut tables: Vec<(&str, &str, WeightTable)> = Vec::new();
        if let Some(t) = targets {
            tables.push(("targets", layout::TARGETS, t));
        }
        if let Some(t) = base {
            tables.push(("reported_base", layout::REPORTED_BASE, t));
        }
        if let Some(t) = trained {
            tables.push(("reported_trained", layout::REPORTED_TRAINED, t));
        }
        groups.push((
            "",
            Tables {
                set,
                reference_name: "learned",
                reference: learned,
            },
            tables,
        ));
    }
    if let Some(set) = load_set(run_dir, layout::TRANSFER_CONTEXTS)? {
        let learned = load_learned(run_dir, layout::NATIVE_LEARNED, &set, &mut report.unconverged)?;
        let base = load_table(run_dir, layout::NATIVE_REPORTED_BASE, WeightRole::Reported)?;
        let trained = load_table(run_dir, layout::NATIVE_REPORTED_TRAINED, WeightRole::Reported)?;
        let mut tables: Vec<(&str, &str, WeightTable)> = Vec::new();
        if let Some(t) = base {
            tables.push(("reported_base", layout::NATIVE_REPORTED_BASE, t));
        }
        if let Some(t) = trained {
            tables.push(("reported_trained", layout::NATIVE_REPORTED_TRAINED, t));
        }
        groups.push((
            "native_",
            Tables {
                set,
                reference_name: "learned_native",
                reference: learned,
            },
            tables,
        ));
    }

    for (prefix, group, tables) in &groups {
        let set = &group.set;
        if let Some(reference) = &group.reference {
            report.excluded.insert(
                format!("learned ({})", set.name),
                set.ids().filter(|id| !reference.contains_key(*id)).map(str::to_string).collect(),
            );
        }
        for (_, file, table) in tables {
            report.excluded.insert(
                file.to_string(),
                set.ids().filter(|id| !table.contains_key(*id)).map(str::to_string).collect(),
            );
        }
        let Some(reference) = &group.reference else {
            continue;
        };
        for (label, _, table) in tables {
            let name = format!("{prefix}{label}_vs_{}", group.reference_name);
            let ids = common_ids(set, &[table, reference]);
            let sample = paired_sample(set, &ids, table, reference, "", *label == "reported_trained")?;
            let estimate = bootstrap_correlation(&sample, settings, stream.derive(&name, "", 0))?;
            draws.insert(name.clone(), estimate.draw_values.clone());
            report.correlations.insert(
                name,
                Correlation {
                    context_set: set.name.clone(),
                    x: label.to_string(),
                    y: group.reference_name.to_string(),
                    contexts: ids.len(),
                    estimate: estimate.without_draws(),
                },
            );
        }
        let find = |l: &str| tables.iter().find(|(label, _, _)| *label == l).map(|(_, _, t)| t);
        if let (Some(before), Some(after)) = (find("reported_base"), find("reported_trained")) {
            let name = format!("{prefix}introspection_training");
            let ids = common_ids(set, &[reference, before, after]);
            let a = paired_sample(set, &ids, before, reference, "", false)?;
            let b = paired_sample(set, &ids, after, reference, "", true)?;
            let estimate =
                correlation_contrast(&a, &b, ContrastMode::Paired, settings, stream.derive(&name, "", 0))?;
            draws.insert(name.clone(), estimate.draw_values.clone());
            report.contrasts.insert(
                name,
                Contrast {
                    context_set: set.name.clone(),
                    reference: group.reference_name.to_string(),
                    before: "reported_base".into(),
                    after: "reported_trained".into(),
                    mode: ContrastMode::Paired,
                    contexts: ids.len(),
                    estimate: estimate.without_draws(),
                },
            );
        }
    }
    // reported-vs-target on the training set, for comparison with the
    // reported-vs-learned figures
    if let Some((_, group, tables)) = groups.first() {
        let find = |l: &str| tables.iter().find(|(label, _, _)| *label == l).map(|(_, _, t)| t);
        if let (Some(targets), Some(base)) = (find("targets"), find("reported_base")) {
            let name = "reported_base_vs_targets".to_string();
            let ids = common_ids(&group.set, &[base, targets]);
            let sample = paired_sample(&group.set, &ids, base, targets, "", false)?;
            let estimate = bootstrap_correlation(&sample, settings, stream.derive(&name, "", 0))?;
            draws.insert(name.clone(), estimate.draw_values.clone());
            report.correlations.insert(
                name,
                Correlation {
                    context_set: group.set.name.clone(),
                    x: "reported_base".into(),
                    y: "targets".into(),
                    contexts: ids.len(),
                    estimate: estimate.without_draws(),
                },
            );
        }
    }

    tally_dir(run_dir, "choices", &mut report.tallies)?;
    tally_dir(run_dir, "reports", &mut report.tallies)?;
    Ok(Analysis { report, draws })
}
