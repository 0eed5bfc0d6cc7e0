//! Browser bindings for three small experiments on the bundled contexts:
//! recovering weights from simulated choices, scoring noisy self-reports
//! with a bootstrap interval, and previewing the prompts a model sees.
//!
//! Every function returns a JSON string so the page needs no glue types.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use selfreport::estimation::{compute_diffs, fit_logistic, DiffRow};
use selfreport::model::{sample_pair, sample_weight_table, ContextSet, Selection};
use selfreport::prompts::{render_decision_prompt, render_introspection_prompt};
use selfreport::report::{parse_report, render_weights_json};
use selfreport::stats::{bootstrap_correlation, pearson, BootstrapSettings, PairedRow, PairedWeightSample};
use selfreport::subject::{subject_decide, subject_report, SubjectConfig};
use selfreport::Seed;

const SET: &str = "original-100";

fn contexts(limit: usize) -> Result<ContextSet, JsValue> {
    let all = ContextSet::builtin(SET).ok_or_else(|| JsValue::from_str("bundled contexts missing"))?;
    let ids: Vec<String> = all.ids().take(limit.clamp(2, all.len())).map(str::to_string).collect();
    all.subset(SET, &ids).map_err(err)
}

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, JsValue> {
    serde_json::to_string(value).map_err(err)
}

#[derive(Serialize)]
struct Recovery {
    /// `(target, learned)` per attribute weight.
    points: Vec<(f64, f64)>,
    r: f64,
    unconverged: usize,
}

/// Simulates `decisions` choices per context from a subject with logit
/// sharpness `sharpness` (0 for coin flips, negative for deterministic),
/// fits each context and correlates learned slopes with the targets.
#[wasm_bindgen]
pub fn recovery(seed: u32, sharpness: f64, decisions: u32, n_contexts: u32) -> Result<String, JsValue> {
    let seed = Seed(u64::from(seed));
    let set = contexts(n_contexts as usize)?;
    let targets = sample_weight_table(seed.stream("targets"), &set);
    let mut subject = SubjectConfig::new(targets.clone());
    subject.choice_sharpness = if sharpness < 0.0 { f64::INFINITY } else { sharpness };
    let mut points = Vec::new();
    let mut unconverged = 0;
    for ctx in &set {
        let rows = (0..u64::from(decisions.max(1)))
            .map(|i| {
                let pair = sample_pair(seed.stream("pairs"), ctx, i);
                let choice = subject_decide(&subject, ctx, &pair, seed.derive("choice", &ctx.context_id, i))?;
                Ok(DiffRow {
                    d: compute_diffs(&pair, ctx)?.to_vec(),
                    selected_a: choice == Selection::A,
                })
            })
            .collect::<selfreport::Result<Vec<_>>>()
            .map_err(err)?;
        let fit = fit_logistic(&rows, 1.0).map_err(err)?;
        unconverged += usize::from(!fit.converged);
        let target = targets[&ctx.context_id].values_for(ctx).map_err(err)?;
        points.extend(target.iter().copied().zip(fit.slopes().iter().copied()));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let r = pearson(&x, &y).map_err(err)?;
    to_json(&Recovery { points, r, unconverged })
}

#[derive(Serialize)]
struct Attenuation {
    points: Vec<(f64, f64)>,
    r: f64,
    hdi: (f64, f64),
    invalid: usize,
    /// Bootstrap draws, for a histogram.
    draws: Vec<f64>,
}

/// Draws one report per context with the given noise, shrinkage and
/// malformed rate, then scores reported against target weights.
#[wasm_bindgen]
pub fn attenuation(
    seed: u32,
    noise_sd: f64,
    shrinkage: f64,
    invalid_rate: f64,
    draws: u32,
) -> Result<String, JsValue> {
    let seed = Seed(u64::from(seed));
    let set = contexts(usize::MAX)?;
    let targets = sample_weight_table(seed.stream("targets"), &set);
    let mut subject = SubjectConfig::new(targets.clone());
    subject.report_noise_sd = noise_sd.max(0.0);
    subject.report_shrinkage = shrinkage.clamp(0.0, 1.0);
    subject.invalid_report_rate = invalid_rate.clamp(0.0, 1.0);
    let mut rows = Vec::new();
    let mut invalid = 0;
    for ctx in &set {
        let raw = subject_report(&subject, ctx, seed.derive("report", &ctx.context_id, 0)).map_err(err)?;
        let Some(parsed) = parse_report(&raw, ctx).parsed else {
            invalid += 1;
            continue;
        };
        let reported = parsed.values_for(ctx).map_err(err)?;
        let target = targets[&ctx.context_id].values_for(ctx).map_err(err)?;
        for ((spec, x), y) in ctx.attributes.iter().zip(reported).zip(target) {
            rows.push(PairedRow {
                x,
                y,
                context_id: ctx.context_id.clone(),
                attribute: spec.name.clone(),
                model: "synthetic".into(),
                trained: false,
            });
        }
    }
    let points = rows.iter().map(|r| (r.y, r.x)).collect();
    let settings = BootstrapSettings {
        draws: draws.clamp(100, 10_000) as usize,
        mass: 0.95,
    };
    let est = bootstrap_correlation(&PairedWeightSample::new(rows), settings, seed.stream("bootstrap")).map_err(err)?;
    to_json(&Attenuation {
        points,
        r: est.point_r,
        hdi: (est.hdi_low, est.hdi_high),
        invalid,
        draws: est.draw_values,
    })
}

#[derive(Serialize)]
struct Preview {
    context_id: String,
    system: String,
    decision: String,
    introspection: String,
    /// What a subject holding the target weights answers.
    decision_answer: String,
    introspection_answer: String,
}

/// Renders both prompts for one context and pair, with the answers a
/// subject holding the sampled target weights would give.
#[wasm_bindgen]
pub fn prompt_preview(seed: u32, context_index: u32, pair_id: u32) -> Result<String, JsValue> {
    let seed = Seed(u64::from(seed));
    let set = contexts(usize::MAX)?;
    let ctx = &set.contexts()[context_index as usize % set.len()];
    let pair = sample_pair(seed.stream("pairs"), ctx, u64::from(pair_id));
    let target = sample_weight_table(seed.stream("targets"), &set)[&ctx.context_id].clone();
    let decision = render_decision_prompt(ctx, &pair).map_err(err)?;
    let introspection = render_introspection_prompt(ctx, &pair).map_err(err)?;
    let subject = SubjectConfig::new([(ctx.context_id.clone(), target.clone())].into_iter().collect());
    let answer = subject_decide(&subject, ctx, &pair, seed).map_err(err)?;
    to_json(&Preview {
        context_id: ctx.context_id.clone(),
        system: decision.system_text,
        decision: decision.user_text,
        introspection: introspection.user_text,
        decision_answer: answer.as_str().to_string(),
        introspection_answer: render_weights_json(ctx, &target.values_for(ctx).map_err(err)?, Some(1)),
    })
}

/// Number of bundled contexts, for the page's context picker.
#[wasm_bindgen]
pub fn context_count() -> usize {
    ContextSet::builtin(SET).map_or(0, |s| s.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovery_is_strong_for_sharp_subjects() {
        let out: serde_json::Value = serde_json::from_str(&recovery(1, 0.05, 400, 10).unwrap()).unwrap();
        assert_eq!(out["points"].as_array().unwrap().len(), 50);
        assert!(out["r"].as_f64().unwrap() > 0.9);
    }

    #[test]
    fn attenuation_reports_an_interval() {
        let out: serde_json::Value = serde_json::from_str(&attenuation(2, 60.0, 1.0, 0.0, 500).unwrap()).unwrap();
        let r = out["r"].as_f64().unwrap();
        let (lo, hi) = (out["hdi"][0].as_f64().unwrap(), out["hdi"][1].as_f64().unwrap());
        assert!(lo <= r && r <= hi);
        assert_eq!(out["points"].as_array().unwrap().len(), 500);
    }

    #[test]
    fn preview_contains_both_tasks() {
        let out: serde_json::Value = serde_json::from_str(&prompt_preview(3, 0, 0).unwrap()).unwrap();
        assert!(out["decision"].as_str().unwrap().starts_with("[DECISION TASK]"));
        assert!(out["introspection"].as_str().unwrap().starts_with("[INTROSPECTION TASK]"));
        assert!(matches!(out["decision_answer"].as_str(), Some("A" | "B")));
        assert_eq!(context_count(), 100);
    }
}
