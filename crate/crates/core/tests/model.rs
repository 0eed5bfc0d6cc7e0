mod common;

use proptest::prelude::*;

use common::*;
use selfreport::model::{
    decide, normalize_value, sample_pair, sample_weights, utility, ChoicePair, Selection, WeightRole,
    WeightVector,
};
use selfreport::Seed;

#[test]
fn sampled_weights_fill_the_interval() {
    let set = original();
    let mut all = Vec::new();
    for seed in 0..20u64 {
        for ctx in &set {
            let w = sample_weights(Seed(seed), ctx);
            all.extend(w.values_for(ctx).unwrap());
        }
    }
    assert_eq!(all.len(), 10_000);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(mean.abs() <= 3.0, "mean {mean}");
    assert!(min < -95.0 && max > 95.0, "range [{min}, {max}]");
    assert!(all.iter().all(|w| (-100.0..=100.0).contains(w)));
}

#[test]
fn sampled_pairs_cover_each_range() {
    let ctx = vacuum();
    let spec = &ctx.attributes[0];
    let values: Vec<f64> = (0..5_000u64)
        .flat_map(|i| {
            let p = sample_pair(Seed(3), &ctx, i);
            [p.option_a.values[&spec.name], p.option_b.values[&spec.name]]
        })
        .collect();
    let width = spec.range_max - spec.range_min;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(min - spec.range_min <= 0.01 * width, "min {min}");
    assert!(spec.range_max - max <= 0.01 * width, "max {max}");
}

#[test]
fn appendix_pair_has_expected_normalized_values() {
    let ctx = vacuum();
    let spec = &ctx.attributes[0];
    // 597 air watts on a 400..1000 scale
    let n = normalize_value(597.0, spec).unwrap();
    assert!((n - 197.0 / 600.0).abs() < 1e-15);
    assert!(normalize_value(1000.5, spec).is_err());
}

fn ctx_weights(values: [f64; 5]) -> WeightVector {
    WeightVector::from_values(&vacuum(), &values, WeightRole::Target)
}

fn weight_strategy() -> impl Strategy<Value = [f64; 5]> {
    proptest::array::uniform5(-100.0f64..=100.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decide_matches_oracle_on_sampled_pairs(w in weight_strategy(), seed in 0u64..1000, id in 0u64..50) {
        let ctx = vacuum();
        let pair = sample_pair(Seed(seed), &ctx, id);
        let a = pair.option_a.values_for(&ctx).unwrap();
        let b = pair.option_b.values_for(&ctx).unwrap();
        let got = decide(&ctx_weights(w), &pair, &ctx).unwrap();
        prop_assert_eq!(got.as_str(), oracle_choice(&w, &a, &b, &ctx));
    }

    #[test]
    fn decide_ignores_positive_scaling(w in weight_strategy(), c in 0.01f64..100.0, seed in 0u64..1000) {
        let ctx = vacuum();
        let pair = sample_pair(Seed(seed), &ctx, 0);
        let ua = utility(&ctx_weights(w), &pair.option_a, &ctx).unwrap();
        let ub = utility(&ctx_weights(w), &pair.option_b, &ctx).unwrap();
        // scaling can only change the answer through rounding at a near tie
        prop_assume!((ua - ub).abs() > 1e-9 * (ua.abs() + ub.abs() + 1.0));
        let scaled = w.map(|v| v * c);
        prop_assert_eq!(
            decide(&ctx_weights(w), &pair, &ctx).unwrap(),
            decide(&ctx_weights(scaled), &pair, &ctx).unwrap()
        );
    }

    #[test]
    fn swapping_options_picks_the_same_profile(w in weight_strategy(), seed in 0u64..1000) {
        let ctx = vacuum();
        let pair = sample_pair(Seed(seed), &ctx, 1);
        let wv = ctx_weights(w);
        prop_assume!(utility(&wv, &pair.option_a, &ctx).unwrap() != utility(&wv, &pair.option_b, &ctx).unwrap());
        let first = decide(&wv, &pair, &ctx).unwrap();
        let second = decide(&wv, &pair.swapped(), &ctx).unwrap();
        let chosen = |p: &ChoicePair, s: Selection| match s {
            Selection::A => p.option_a.clone(),
            Selection::B => p.option_b.clone(),
        };
        prop_assert_eq!(chosen(&pair, first), chosen(&pair.swapped(), second));
    }

    #[test]
    fn utility_is_linear_in_weights(w in weight_strategy(), v in weight_strategy(), seed in 0u64..1000) {
        let ctx = vacuum();
        let option = sample_pair(Seed(seed), &ctx, 2).option_a;
        let sum: [f64; 5] = std::array::from_fn(|i| w[i] + v[i]);
        let lhs = utility(&ctx_weights(w), &option, &ctx).unwrap() + utility(&ctx_weights(v), &option, &ctx).unwrap();
        let rhs = utility(&ctx_weights(sum), &option, &ctx).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn sampling_is_a_function_of_seed_and_id(seed in any::<u64>(), id in any::<u64>()) {
        let ctx = vacuum();
        prop_assert_eq!(sample_pair(Seed(seed), &ctx, id), sample_pair(Seed(seed), &ctx, id));
        prop_assert_eq!(sample_weights(Seed(seed), &ctx), sample_weights(Seed(seed), &ctx));
        let p = sample_pair(Seed(seed), &ctx, id);
        prop_assert!(p.validate(&ctx).is_ok());
    }
}
