mod common;

use common::*;
use selfreport::estimation::{compute_diffs, fit_logistic, DiffRow};
use selfreport::model::{decide, sample_pair, sample_weight_table, Selection};
use selfreport::report::parse_report;
use selfreport::stats::{bootstrap_correlation, BootstrapSettings};
use selfreport::subject::{subject_decide, subject_report, SubjectConfig};
use selfreport::Seed;

fn subject(seed: u64) -> SubjectConfig {
    SubjectConfig::new(sample_weight_table(Seed(seed), &original()))
}

#[test]
fn zero_sharpness_is_a_coin_flip() {
    let mut config = subject(1);
    config.choice_sharpness = 0.0;
    let ctx = vacuum();
    let a = (0..10_000u64)
        .filter(|&i| {
            let pair = sample_pair(Seed(2), &ctx, i);
            subject_decide(&config, &ctx, &pair, Seed(3).derive("trial", "", i)).unwrap() == Selection::A
        })
        .count();
    let rate = a as f64 / 10_000.0;
    assert!((0.48..=0.52).contains(&rate), "A-rate {rate}");
}

#[test]
fn infinite_sharpness_is_the_choice_rule() {
    let config = subject(4);
    for ctx in original().iter().take(20) {
        let latent = config.latent(&ctx.context_id).unwrap();
        for i in 0..100u64 {
            let pair = sample_pair(Seed(5), ctx, i);
            assert_eq!(
                subject_decide(&config, ctx, &pair, Seed(i)).unwrap(),
                decide(latent, &pair, ctx).unwrap()
            );
        }
    }
}

#[test]
fn sharp_subject_weights_are_recovered() {
    let mut config = subject(6);
    config.choice_sharpness = 5.0;
    let (mut latent, mut learned) = (Vec::new(), Vec::new());
    for ctx in original().iter().take(10) {
        let rows: Vec<DiffRow> = (0..5_000u64)
            .map(|i| {
                let pair = sample_pair(Seed(7), ctx, i);
                let choice = subject_decide(&config, ctx, &pair, Seed(8).derive("t", &ctx.context_id, i)).unwrap();
                DiffRow {
                    d: compute_diffs(&pair, ctx).unwrap().to_vec(),
                    selected_a: choice == Selection::A,
                }
            })
            .collect();
        let fit = fit_logistic(&rows, 1.0).unwrap();
        latent.extend(config.latent(&ctx.context_id).unwrap().values_for(ctx).unwrap());
        learned.extend_from_slice(fit.slopes());
    }
    let r = oracle_pearson(&latent, &learned);
    assert!(r >= 0.95, "r = {r}");
}

#[test]
fn reports_stay_in_bounds_and_parse() {
    let mut config = subject(9);
    config.report_noise_sd = 500.0;
    config.report_shrinkage = 0.7;
    for ctx in original().iter().take(30) {
        for i in 0..20u64 {
            let raw = subject_report(&config, ctx, Seed(10).derive("r", &ctx.context_id, i)).unwrap();
            let record = parse_report(&raw, ctx);
            let parsed = record.parsed.expect("valid report");
            assert!(parsed.values_for(ctx).unwrap().iter().all(|v| v.abs() <= 100.0));
            // the subject clamps before writing, so the parser never has to
            assert!(record.clamped.is_empty());
        }
    }
}

#[test]
fn invalid_rate_controls_malformed_reports() {
    let mut config = subject(11);
    config.invalid_report_rate = 0.3;
    let ctx = vacuum();
    let bad = (0..5_000u64)
        .filter(|&i| !parse_report(&subject_report(&config, &ctx, Seed(12).derive("r", "", i)).unwrap(), &ctx).is_valid())
        .count();
    let rate = bad as f64 / 5_000.0;
    // binomial sd is about 0.0065
    assert!((rate - 0.3).abs() < 0.03, "invalid rate {rate}");
}

/// Unbiased reports with noise chosen to attenuate the correlation to a known
/// value: the bootstrap point estimate should sit inside its own interval and
/// near the target.
#[test]
fn calibrated_noise_reaches_expected_correlation() {
    let sd_w = 200.0 / 12f64.sqrt();
    let target_r = 0.6;
    let mut inside = 0;
    let mut points = Vec::new();
    for rep in 0..20u64 {
        let mut config = subject(100 + rep);
        config.report_noise_sd = attenuation_sd(sd_w, target_r);
        let (mut truth, mut reported) = (Vec::new(), Vec::new());
        for ctx in original().iter() {
            let raw = subject_report(&config, ctx, Seed(rep).derive("r", &ctx.context_id, 0)).unwrap();
            let parsed = parse_report(&raw, ctx).parsed.unwrap();
            truth.extend(config.latent(&ctx.context_id).unwrap().values_for(ctx).unwrap());
            reported.extend(parsed.values_for(ctx).unwrap());
        }
        let est = bootstrap_correlation(
            &sample(&truth, &reported),
            BootstrapSettings { draws: 2_000, mass: 0.95 },
            Seed(rep),
        )
        .unwrap();
        if est.hdi_contains(est.point_r) {
            inside += 1;
        }
        points.push(est.point_r);
    }
    let mean = points.iter().sum::<f64>() / points.len() as f64;
    assert!(inside >= 18, "{inside}/20 intervals hold their own point");
    // clamping at +-100 trims the noise a little, so r lands slightly high
    assert!((mean - target_r).abs() < 0.08, "mean r {mean}");
}
