mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use common::*;
use selfreport::stats::{
    bootstrap_correlation, correlation_contrast, hdi, pearson, BootstrapSettings, ContrastMode,
};
use selfreport::Seed;

fn quick() -> BootstrapSettings {
    BootstrapSettings { draws: 2_000, mass: 0.95 }
}

#[test]
fn hdi_of_normal_draws_matches_quantiles() {
    let mut g = rng(42);
    let draws: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut g)).collect();
    let normal = Normal::new(0.0, 1.0).unwrap();
    for mass in [0.5, 0.8, 0.9, 0.95, 0.99] {
        let q = normal.inverse_cdf(0.5 + mass / 2.0);
        let (lo, hi) = hdi(&draws, mass).unwrap();
        assert!((lo + q).abs() < 0.05 && (hi - q).abs() < 0.05, "mass {mass}: [{lo}, {hi}] vs ±{q}");
    }
}

#[test]
fn hdi_tie_rule_and_degenerate_cases() {
    let uniform: Vec<f64> = (0..100).map(f64::from).collect();
    assert_eq!(hdi(&uniform, 0.95).unwrap(), (0.0, 94.0));
    assert_eq!(hdi(&[3.5; 40], 0.95).unwrap(), (3.5, 3.5));
    assert!(hdi(&uniform[..19], 0.95).is_err());
}

#[test]
fn perfect_correlation_has_a_point_interval() {
    let x: Vec<f64> = (0..50).map(|i| (i * 7 % 13) as f64).collect();
    let est = bootstrap_correlation(&sample(&x, &x), quick(), Seed(1)).unwrap();
    assert!((est.point_r - 1.0).abs() < 1e-12);
    assert!((est.hdi_low - 1.0).abs() < 1e-12 && (est.hdi_high - 1.0).abs() < 1e-12);
}

#[test]
fn independent_series_usually_cover_zero() {
    let hits = (0..20u64)
        .filter(|&rep| {
            let mut g = rng(rep);
            let x: Vec<f64> = (0..500).map(|_| g.random_range(-100.0..100.0)).collect();
            let y: Vec<f64> = (0..500).map(|_| g.random_range(-100.0..100.0)).collect();
            bootstrap_correlation(&sample(&x, &y), quick(), Seed(rep)).unwrap().hdi_contains(0.0)
        })
        .count();
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn attenuation_point_estimate_and_coverage() {
    let r = 0.7;
    let mut covered = 0;
    for rep in 0..20u64 {
        let (w, y) = attenuated(500, r, 7_000 + rep);
        let est = bootstrap_correlation(&sample(&w, &y), quick(), Seed(rep)).unwrap();
        assert!((est.point_r - r).abs() < 0.1, "rep {rep}: {}", est.point_r);
        covered += est.hdi_contains(r) as usize;
        assert!(est.draw_values.iter().all(|d| (-1.0..=1.0).contains(d)));
        assert!(est.draw_values.iter().any(|d| *d <= est.hdi_low));
        assert!(est.draw_values.iter().any(|d| *d >= est.hdi_high));
    }
    assert!(covered >= 17, "coverage {covered}/20");
}

#[test]
fn attenuation_point_estimate_near_prediction() {
    let errors: Vec<f64> = (0..20u64)
        .map(|rep| {
            let (w, y) = attenuated(500, 0.6, 8_000 + rep);
            pearson(&w, &y).unwrap() - 0.6
        })
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    assert!(mean.abs() < 0.05, "mean error {mean}");
    assert!(errors.iter().filter(|e| e.abs() <= 0.05).count() >= 18);
}

#[test]
fn identical_samples_contrast_to_zero() {
    let (w, y) = attenuated(200, 0.5, 3);
    let s = sample(&w, &y);
    let est = correlation_contrast(&s, &s, ContrastMode::Paired, quick(), Seed(4)).unwrap();
    assert_eq!(est.point_r, 0.0);
    assert!(est.hdi_contains(0.0));
}

#[test]
fn known_improvement_is_recovered() {
    let mut points = Vec::new();
    for rep in 0..10u64 {
        let (w, before) = attenuated(500, 0.5, 9_000 + rep);
        let after = noisy_copy(&w, 0.75, 9_500 + rep);
        let est = correlation_contrast(
            &sample(&w, &before),
            &sample(&w, &after),
            ContrastMode::Paired,
            quick(),
            Seed(rep),
        )
        .unwrap();
        points.push(est.point_r);
        assert!(est.hdi_low > 0.0, "rep {rep}: [{}, {}]", est.hdi_low, est.hdi_high);
    }
    let mean = points.iter().sum::<f64>() / points.len() as f64;
    assert!((mean - 0.25).abs() < 0.07, "mean difference {mean}");
}

#[test]
fn paired_mode_requires_matching_rows() {
    let (w, y) = attenuated(100, 0.5, 5);
    let a = sample(&w, &y);
    let b = sample(&w[..90], &y[..90]);
    assert!(correlation_contrast(&a, &b, ContrastMode::Paired, quick(), Seed(1)).is_err());
    assert!(correlation_contrast(&a, &b, ContrastMode::Unpaired, quick(), Seed(1)).is_ok());
}

#[test]
fn too_few_rows_is_an_error() {
    assert!(bootstrap_correlation(&sample(&[1.0, 2.0], &[2.0, 1.0]), quick(), Seed(1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pearson_affine_invariance(
        xy in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 5..80),
        scale in 0.01f64..100.0,
        shift in -1e3f64..1e3,
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
        let r = pearson(&x, &y);
        prop_assume!(r.is_ok());
        let r = r.unwrap();
        let moved: Vec<f64> = x.iter().map(|v| v * scale + shift).collect();
        let negated: Vec<f64> = y.iter().map(|v| -v).collect();
        prop_assert!((pearson(&moved, &y).unwrap() - r).abs() < 1e-9);
        prop_assert!((pearson(&x, &negated).unwrap() + r).abs() < 1e-12);
        prop_assert!((r - oracle_pearson(&x, &y)).abs() < 1e-9);
    }

    #[test]
    fn hdi_width_grows_with_mass(values in proptest::collection::vec(-50.0f64..50.0, 20..300)) {
        let mut last = 0.0;
        for mass in [0.5, 0.8, 0.9, 0.95, 0.99] {
            let (lo, hi) = hdi(&values, mass).unwrap();
            prop_assert!(hi - lo >= last);
            last = hi - lo;
        }
    }

    #[test]
    fn row_order_does_not_matter(seed in 0u64..1000) {
        let (w, y) = attenuated(60, 0.6, seed);
        let (w2, y2) = attenuated(60, 0.8, seed + 1);
        let a = sample(&w, &y);
        let b = sample(&w2, &y2);
        let mut order: Vec<usize> = (0..60).collect();
        order.shuffle(&mut rng(seed));
        let shuffle = |s: &selfreport::stats::PairedWeightSample| {
            selfreport::stats::PairedWeightSample::new(order.iter().map(|&i| s.rows[i].clone()).collect())
        };
        let settings = BootstrapSettings { draws: 200, mass: 0.95 };
        prop_assert_eq!(
            correlation_contrast(&a, &b, ContrastMode::Paired, settings, Seed(seed)).unwrap(),
            correlation_contrast(&shuffle(&a), &shuffle(&b), ContrastMode::Paired, settings, Seed(seed)).unwrap()
        );
    }
}
