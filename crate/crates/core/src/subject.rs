//! A synthetic decision-maker with known latent weights.
//!
//! Choices follow a logit relaxation of the deterministic rule; reports are
//! the latent weights shrunk, perturbed with Gaussian noise and clamped.
//! Both knobs are explicit so the estimation and analysis stack can be
//! checked against ground truth.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::{
    decide, read_weight_table, utility, ChoicePair, DecisionContext, Selection, WeightRole,
    WeightTable, WeightVector, WEIGHT_LIMIT,
};
use crate::report::render_weights_json;
use crate::seed::Seed;

/// Serializes `f64::INFINITY` as the string `"inf"`.
pub(crate) mod sharpness {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if value.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*value)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.to_ascii_lowercase().as_str() {
                "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
                other => other
                    .parse()
                    .map_err(|_| serde::de::Error::custom(format!("invalid sharpness {t:?}"))),
            },
        }
    }
}

pub(crate) fn infinite() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectConfig {
    pub latent_weights: WeightTable,
    /// Logit sharpness; infinity means the deterministic rule.
    #[serde(with = "sharpness", default = "infinite")]
    pub choice_sharpness: f64,
    #[serde(default)]
    pub report_noise_sd: f64,
    #[serde(default = "one")]
    pub report_shrinkage: f64,
    #[serde(default)]
    pub invalid_report_rate: f64,
}

fn one() -> f64 {
    1.0
}

/// On-disk form: latent weights inline or referenced by path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_weights: Option<WeightTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_weights_path: Option<PathBuf>,
    #[serde(with = "sharpness", default = "infinite")]
    pub choice_sharpness: f64,
    #[serde(default)]
    pub report_noise_sd: f64,
    #[serde(default = "one")]
    pub report_shrinkage: f64,
    #[serde(default)]
    pub invalid_report_rate: f64,
}

impl SubjectConfig {
    pub fn new(latent_weights: WeightTable) -> Self {
        SubjectConfig {
            latent_weights,
            choice_sharpness: f64::INFINITY,
            report_noise_sd: 0.0,
            report_shrinkage: 1.0,
            invalid_report_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("subject {what}")));
        if self.choice_sharpness.is_nan() || self.choice_sharpness < 0.0 {
            return bad("choice_sharpness must be >= 0");
        }
        if !(self.report_noise_sd >= 0.0 && self.report_noise_sd.is_finite()) {
            return bad("report_noise_sd must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.report_shrinkage) {
            return bad("report_shrinkage must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.invalid_report_rate) {
            return bad("invalid_report_rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn latent(&self, context_id: &str) -> Result<&WeightVector> {
        self.latent_weights.get(context_id).ok_or_else(|| {
            Error::config(format!("subject has no latent weights for {context_id}"))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read subject {}: {e}", path.display())))?;
        let file: SubjectFile = serde_json::from_str(&text)?;
        let latent_weights = match (file.latent_weights, file.latent_weights_path) {
            (Some(w), None) => w,
            (None, Some(p)) => {
                let p = if p.is_relative() {
                    path.parent().unwrap_or(Path::new(".")).join(p)
                } else {
                    p
                };
                read_weight_table(&p, WeightRole::Target)?
            }
            _ => {
                return Err(Error::config(
                    "subject file needs exactly one of latent_weights / latent_weights_path",
                ))
            }
        };
        let config = SubjectConfig {
            latent_weights,
            choice_sharpness: file.choice_sharpness,
            report_noise_sd: file.report_noise_sd,
            report_shrinkage: file.report_shrinkage,
            invalid_report_rate: file.invalid_report_rate,
        };
        config.validate()?;
        Ok(config)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Chooses A with probability `logistic(sharpness * (u_A - u_B))`.
pub fn subject_decide(
    config: &SubjectConfig,
    context: &DecisionContext,
    pair: &ChoicePair,
    seed: Seed,
) -> Result<Selection> {
    let latent = config.latent(&context.context_id)?;
    if config.choice_sharpness.is_infinite() {
        return decide(latent, pair, context);
    }
    let gap = utility(latent, &pair.option_a, context)? - utility(latent, &pair.option_b, context)?;
    let p_a = logistic(config.choice_sharpness * gap);
    let draw: f64 = seed.rng().random();
    Ok(if draw < p_a { Selection::A } else { Selection::B })
}

/// Emits a raw introspection answer, malformed with probability
/// `invalid_report_rate`.
pub fn subject_report(config: &SubjectConfig, context: &DecisionContext, seed: Seed) -> Result<String> {
    let latent = config.latent(&context.context_id)?.values_for(context)?;
    let mut rng = seed.rng();
    let malformed = rng.random::<f64>() < config.invalid_report_rate;
    let noise = Normal::new(0.0, config.report_noise_sd.max(0.0))
        .map_err(|e| Error::config(format!("report noise: {e}")))?;
    let reported: Vec<f64> = latent
        .iter()
        .map(|w| {
            let eps = if config.report_noise_sd > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            (config.report_shrinkage * w + eps).clamp(-WEIGHT_LIMIT, WEIGHT_LIMIT)
        })
        .collect();
    if !malformed {
        return Ok(render_weights_json(context, &reported, None));
    }
    let variant = rng.random_range(0..4u8);
    Ok(match variant {
        0 => {
            let k = rng.random_range(0..context.attributes.len());
            render_weights_json(&drop_attribute(context, k), &without(&reported, k), None)
        }
        1 => {
            let body = render_weights_json(context, &reported, None);
            format!("{}, \"overall_quality\": 50}}", &body[..body.len() - 1])
        }
        2 => format!(
            "I mostly cared about {} when deciding.",
            context.attributes[0].name
        ),
        _ => {
            let body = render_weights_json(context, &reported, None);
            let first = serde_json::to_string(&context.attributes[0].name).expect("name");
            let rest = body.split_once(", ").map(|(_, r)| r).unwrap_or("}");
            format!("{{{first}: \"very important\", {rest}")
        }
    })
}

fn drop_attribute(context: &DecisionContext, index: usize) -> DecisionContext {
    let mut reduced = context.clone();
    reduced.attributes.remove(index);
    reduced
}

fn without(values: &[f64], index: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.remove(index);
    v
}
