//! Helpers shared by the integration tests. Each oracle here is written
//! independently of the library code it checks.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use selfreport::model::{ChoicePair, ContextSet, DecisionContext, OptionProfile};
use selfreport::stats::{PairedRow, PairedWeightSample};

pub fn original() -> ContextSet {
    ContextSet::builtin("original-100").expect("bundled set")
}

pub fn vacuum() -> DecisionContext {
    original().contexts()[0].clone()
}

/// The example pair printed in the paper's prompt appendix.
pub fn appendix_pair() -> ChoicePair {
    let ctx = vacuum();
    ChoicePair {
        context_id: ctx.context_id.clone(),
        pair_id: 0,
        option_a: OptionProfile::from_values(&ctx, &[597.0, 68.0, 5.0, 45.0, 97.0]),
        option_b: OptionProfile::from_values(&ctx, &[926.0, 65.0, 3.0, 31.0, 95.0]),
    }
}

pub fn fixture(name: &str) -> String {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/");
    std::fs::read_to_string(format!("{path}{name}")).expect("fixture")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Textbook utility: sum of weight times min-max normalized value.
pub fn oracle_utility(weights: &[f64], values: &[f64], ctx: &DecisionContext) -> f64 {
    weights
        .iter()
        .zip(values)
        .zip(&ctx.attributes)
        .map(|((w, v), a)| w * (v - a.range_min) / (a.range_max - a.range_min))
        .sum()
}

/// "A" unless B scores strictly higher.
pub fn oracle_choice(weights: &[f64], a: &[f64], b: &[f64], ctx: &DecisionContext) -> &'static str {
    if oracle_utility(weights, b, ctx) > oracle_utility(weights, a, ctx) {
        "B"
    } else {
        "A"
    }
}

pub fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn sample(x: &[f64], y: &[f64]) -> PairedWeightSample {
    PairedWeightSample::new(
        x.iter()
            .zip(y)
            .enumerate()
            .map(|(i, (x, y))| PairedRow {
                x: *x,
                y: *y,
                context_id: format!("c{:04}", i / 5),
                attribute: format!("a{}", i % 5),
                model: "synthetic".into(),
                trained: false,
            })
            .collect(),
    )
}

/// Noise sd that attenuates a series with sd `sd_w` to correlation `r`.
pub fn attenuation_sd(sd_w: f64, r: f64) -> f64 {
    sd_w * (1.0 / (r * r) - 1.0).sqrt()
}

/// Weights uniform on [-100, 100] and a noisy copy whose population
/// correlation with them is `r`.
pub fn attenuated(n: usize, r: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut g = rng(seed);
    let w: Vec<f64> = (0..n).map(|_| g.random_range(-100.0..=100.0)).collect();
    let noisy = noisy_copy(&w, r, seed ^ 0x9e37_79b9);
    (w, noisy)
}

pub fn noisy_copy(w: &[f64], r: f64, seed: u64) -> Vec<f64> {
    let mut g = rng(seed);
    let sd_w = 200.0 / 12f64.sqrt();
    let noise = Normal::new(0.0, attenuation_sd(sd_w, r)).unwrap();
    w.iter().map(|v| v + noise.sample(&mut g)).collect()
}
