//! Correlations between weight sets and their uncertainty.
//!
//! Uncertainty comes from the Bayesian bootstrap: each draw puts
//! Dirichlet(1, ..., 1) weights on the rows and recomputes a weighted
//! Pearson correlation. Intervals are highest-density intervals over the
//! draws.

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Seed;

pub const DEFAULT_DRAWS: usize = 10_000;
pub const DEFAULT_MASS: f64 = 0.95;
pub const MAX_RETAINED_DRAWS: usize = 10_000;
const MAX_REDRAWS: usize = 100;
const MIN_HDI_VALUES: usize = 20;

/// Standard Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::domain(format!(
            "pearson needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::domain("pearson needs at least 3 points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::domain("pearson input has zero variance"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation under observation weights summing to one; `None`
/// when either weighted variance vanishes.
pub fn weighted_pearson(x: &[f64], y: &[f64], w: &[f64]) -> Option<f64> {
    let mx: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let my: f64 = y.iter().zip(w).map(|(a, b)| a * b).sum();
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for ((a, b), wi) in x.iter().zip(y).zip(w) {
        let (dx, dy) = (a - mx, b - my);
        sxy += wi * dx * dy;
        sxx += wi * dx * dx;
        syy += wi * dy * dy;
    }
    let denom = (sxx * syy).sqrt();
    if denom.is_nan() || denom <= f64::MIN_POSITIVE {
        return None;
    }
    Some((sxy / denom).clamp(-1.0, 1.0))
}

/// Narrowest interval spanning `ceil(mass * n)` consecutive sorted values;
/// ties resolve to the lowest window.
pub fn hdi(values: &[f64], mass: f64) -> Result<(f64, f64)> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(Error::domain(format!("hdi mass must lie in (0, 1), got {mass}")));
    }
    if values.len() < MIN_HDI_VALUES {
        return Err(Error::domain(format!(
            "hdi needs at least {MIN_HDI_VALUES} values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::domain("hdi input contains NaN"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // guard against 0.95 * 100 = 95.00000000000001
    let k = ((mass * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut best = 0;
    let mut best_width = f64::INFINITY;
    for start in 0..=n - k {
        let width = sorted[start + k - 1] - sorted[start];
        if width < best_width {
            best_width = width;
            best = start;
        }
    }
    Ok((sorted[best], sorted[best + k - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub x: f64,
    pub y: f64,
    pub context_id: String,
    pub attribute: String,
    #[serde(default)]
    pub model: String,
    #[serde(default)]
    pub trained: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedWeightSample {
    pub rows: Vec<PairedRow>,
}

impl PairedWeightSample {
    pub fn new(rows: Vec<PairedRow>) -> Self {
        PairedWeightSample { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows ordered by `(context_id, attribute)` so results do not depend on
    /// the order rows were collected in.
    fn canonical(&self) -> Vec<&PairedRow> {
        let mut rows: Vec<&PairedRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            (a.context_id.as_str(), a.attribute.as_str())
                .cmp(&(b.context_id.as_str(), b.attribute.as_str()))
        });
        rows
    }

    fn validate(&self) -> Result<()> {
        if self.rows.len() < 3 {
            return Err(Error::domain(format!(
                "correlation needs at least 3 rows, got {}",
                self.rows.len()
            )));
        }
        if self.rows.iter().any(|r| !(r.x.is_finite() && r.y.is_finite())) {
            return Err(Error::domain("paired sample contains non-finite values"));
        }
        Ok(())
    }

    fn columns(rows: &[&PairedRow]) -> (Vec<f64>, Vec<f64>) {
        (rows.iter().map(|r| r.x).collect(), rows.iter().map(|r| r.y).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimate {
    pub point_r: f64,
    pub hdi_low: f64,
    pub hdi_high: f64,
    pub mass: f64,
    pub draws: usize,
    /// Draws that had to be repeated because a weighted variance vanished.
    pub redraws: usize,
    pub rows: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub draw_values: Vec<f64>,
}

impl CorrelationEstimate {
    pub fn hdi_contains(&self, value: f64) -> bool {
        self.hdi_low <= value && value <= self.hdi_high
    }

    pub fn without_draws(mut self) -> Self {
        self.draw_values.clear();
        self
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapSettings {
    pub draws: usize,
    pub mass: f64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        BootstrapSettings {
            draws: DEFAULT_DRAWS,
            mass: DEFAULT_MASS,
        }
    }
}

fn dirichlet_weights(seed: Seed, n: usize) -> Vec<f64> {
    let mut rng = seed.rng();
    let mut w: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Runs `draws` Bayesian-bootstrap iterations; `stat` maps row weights to a
/// statistic or `None` for a degenerate draw.
fn bootstrap<F>(n: usize, draws: usize, seed: Seed, mut stat: F) -> Result<(Vec<f64>, usize)>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let mut values = Vec::with_capacity(draws);
    let mut redraws = 0;
    for i in 0..draws as u64 {
        let mut attempt = 0u64;
        loop {
            let w = dirichlet_weights(seed.derive("bootstrap", "", i).derive("attempt", "", attempt), n);
            if let Some(v) = stat(&w) {
                values.push(v);
                break;
            }
            attempt += 1;
            redraws += 1;
            if attempt as usize >= MAX_REDRAWS {
                return Err(Error::domain(format!(
                    "bootstrap draw {i} stayed degenerate after {MAX_REDRAWS} attempts ({redraws} redraws so far)"
                )));
            }
        }
    }
    Ok((values, redraws))
}

fn retained(mut draws: Vec<f64>) -> Vec<f64> {
    draws.truncate(MAX_RETAINED_DRAWS);
    draws
}

pub fn bootstrap_correlation(
    sample: &PairedWeightSample,
    settings: BootstrapSettings,
    seed: Seed,
) -> Result<CorrelationEstimate> {
    sample.validate()?;
    let rows = sample.canonical();
    let (x, y) = PairedWeightSample::columns(&rows);
    let point_r = pearson(&x, &y)?;
    let (draws, redraws) = bootstrap(x.len(), settings.draws, seed, |w| weighted_pearson(&x, &y, w))?;
    let (hdi_low, hdi_high) = hdi(&draws, settings.mass)?;
    Ok(CorrelationEstimate {
        point_r,
        hdi_low,
        hdi_high,
        mass: settings.mass,
        draws: draws.len(),
        redraws,
        rows: x.len(),
        draw_values: retained(draws),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    /// Both samples cover the same `(context, attribute)` rows and share one
    /// Dirichlet draw per iteration.
    Paired,
    /// Independent draws for each sample.
    Unpaired,
}

/// Uncertainty over `r_b - r_a`.
pub fn correlation_contrast(
    sample_a: &PairedWeightSample,
    sample_b: &PairedWeightSample,
    mode: ContrastMode,
    settings: BootstrapSettings,
    seed: Seed,
) -> Result<CorrelationEstimate> {
    sample_a.validate()?;
    sample_b.validate()?;
    let rows_a = sample_a.canonical();
    let rows_b = sample_b.canonical();
    let (xa, ya) = PairedWeightSample::columns(&rows_a);
    let (xb, yb) = PairedWeightSample::columns(&rows_b);
    let point = pearson(&xb, &yb)? - pearson(&xa, &ya)?;

    let (draws, redraws) = match mode {
        ContrastMode::Paired => {
            let same_keys = rows_a.len() == rows_b.len()
                && rows_a.iter().zip(&rows_b).all(|(a, b)| {
                    a.context_id == b.context_id && a.attribute == b.attribute
                });
            if !same_keys {
                return Err(Error::domain(
                    "paired contrast needs both samples to cover the same (context, attribute) rows",
                ));
            }
            bootstrap(xa.len(), settings.draws, seed, |w| {
                Some(weighted_pearson(&xb, &yb, w)? - weighted_pearson(&xa, &ya, w)?)
            })?
        }
        ContrastMode::Unpaired => {
            let sa = seed.stream("contrast-a");
            let sb = seed.stream("contrast-b");
            let (ra, ka) = bootstrap(xa.len(), settings.draws, sa, |w| weighted_pearson(&xa, &ya, w))?;
            let (rb, kb) = bootstrap(xb.len(), settings.draws, sb, |w| weighted_pearson(&xb, &yb, w))?;
            (rb.iter().zip(&ra).map(|(b, a)| b - a).collect(), ka + kb)
        }
    };
    let (hdi_low, hdi_high) = hdi(&draws, settings.mass)?;
    Ok(CorrelationEstimate {
        point_r: point,
        hdi_low,
        hdi_high,
        mass: settings.mass,
        draws: draws.len(),
        redraws,
        rows: xa.len().max(xb.len()),
        draw_values: retained(draws),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn sample(x: &[f64], y: &[f64]) -> PairedWeightSample {
        PairedWeightSample::new(
            x.iter()
                .zip(y)
                .enumerate()
                .map(|(i, (a, b))| PairedRow {
                    x: *a,
                    y: *b,
                    context_id: format!("c{:04}", i / 5),
                    attribute: format!("a{}", i % 5),
                    model: String::new(),
                    trained: false,
                })
                .collect(),
        )
    }

    fn quick() -> BootstrapSettings {
        BootstrapSettings { draws: 2_000, mass: 0.95 }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[2.0, 1.0, 4.0, 3.0]).unwrap() - 0.6).abs() < 1e-12);
        assert!(pearson(&x, &[1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(pearson(&x[..2], &x[..2]).is_err());
        assert!(pearson(&x, &x[..3]).is_err());
    }

    #[test]
    fn hdi_examples() {
        let uniform: Vec<f64> = (0..100).map(|v| v as f64).collect();
        assert_eq!(hdi(&uniform, 0.95).unwrap(), (0.0, 94.0));
        assert_eq!(hdi(&[2.5; 40], 0.95).unwrap(), (2.5, 2.5));
        assert!(hdi(&uniform[..19], 0.95).is_err());
        assert!(hdi(&uniform, 1.0).is_err());
        assert!(hdi(&uniform, 0.0).is_err());
    }

    #[test]
    fn hdi_picks_the_dense_region() {
        let mut v: Vec<f64> = (0..90).map(|i| i as f64 * 0.01).collect();
        v.extend((0..10).map(|i| 100.0 + i as f64));
        let (lo, hi) = hdi(&v, 0.9).unwrap();
        assert_eq!((lo, hi), (0.0, 0.89));
    }

    #[test]
    fn perfect_correlation_gives_degenerate_interval() {
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 40.0).collect();
        let est = bootstrap_correlation(&sample(&x, &x), quick(), Seed(1)).unwrap();
        assert!(est.draw_values.iter().all(|r| *r == 1.0));
        assert_eq!((est.hdi_low, est.hdi_high), (1.0, 1.0));
        assert_eq!(est.point_r, 1.0);
    }

    #[test]
    fn bootstrap_is_order_insensitive() {
        let mut rng = Seed(4).rng();
        let x: Vec<f64> = (0..60).map(|_| rng.random_range(-100.0..100.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-80.0..80.0)).collect();
        let s = sample(&x, &y);
        let mut shuffled = s.clone();
        shuffled.rows.reverse();
        shuffled.rows.swap(3, 17);
        let a = bootstrap_correlation(&s, quick(), Seed(2)).unwrap();
        let b = bootstrap_correlation(&shuffled, quick(), Seed(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let s = sample(&[1.0, 2.0], &[2.0, 1.0]);
        assert!(bootstrap_correlation(&s, quick(), Seed(1)).is_err());
    }

    #[test]
    fn identical_contrast_is_zero() {
        let mut rng = Seed(8).rng();
        let x: Vec<f64> = (0..100).map(|_| rng.random_range(-100.0..100.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-90.0..90.0)).collect();
        let s = sample(&x, &y);
        let c = correlation_contrast(&s, &s, ContrastMode::Paired, quick(), Seed(3)).unwrap();
        assert_eq!(c.point_r, 0.0);
        assert!(c.hdi_contains(0.0));
        let u = correlation_contrast(&s, &s, ContrastMode::Unpaired, quick(), Seed(3)).unwrap();
        assert!(u.hdi_contains(0.0));
    }

    #[test]
    fn paired_contrast_requires_matching_rows() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| (v * 1.3).sin()).collect();
        let a = sample(&x, &y);
        let b = sample(&x[..15], &y[..15]);
        assert!(correlation_contrast(&a, &b, ContrastMode::Paired, quick(), Seed(1)).is_err());
        assert!(correlation_contrast(&a, &b, ContrastMode::Unpaired, quick(), Seed(1)).is_ok());
    }

    #[test]
    fn independent_series_usually_cover_zero() {
        let mut covered = 0;
        for rep in 0..20u64 {
            let mut rng = Seed(100 + rep).rng();
            let x: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = (0..500).map(|_| rng.sample(StandardNormal)).collect();
            let est = bootstrap_correlation(&sample(&x, &y), quick(), Seed(rep)).unwrap();
            if est.hdi_contains(0.0) {
                covered += 1;
            }
        }
        assert!(covered >= 18, "{covered}/20");
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..40),
            scale in 0.1f64..10.0,
            shift in -100.0f64..100.0,
        ) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson(&x, &y) {
                let xs: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
                prop_assert!((pearson(&xs, &y).unwrap() - r).abs() < 1e-9);
                let yn: Vec<f64> = y.iter().map(|v| -v).collect();
                prop_assert!((pearson(&x, &yn).unwrap() + r).abs() < 1e-12);
            }
        }

        #[test]
        fn hdi_width_is_monotone_in_mass(values in proptest::collection::vec(-10.0f64..10.0, 20..300)) {
            let mut last = -1.0;
            for mass in [0.5, 0.8, 0.9, 0.95, 0.99] {
                let (lo, hi) = hdi(&values, mass).unwrap();
                prop_assert!(hi - lo >= last);
                prop_assert!(values.contains(&lo) && values.contains(&hi));
                last = hi - lo;
            }
        }

        #[test]
        fn bootstrap_draws_are_correlations(pts in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 5..30)) {
            let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
            prop_assume!(pearson(&x, &y).is_ok());
            if let Ok(est) = bootstrap_correlation(&sample(&x, &y), BootstrapSettings { draws: 200, mass: 0.95 }, Seed(1)) {
                prop_assert!(est.draw_values.iter().all(|r| (-1.0..=1.0).contains(r)));
                prop_assert!(est.draw_values.contains(&est.hdi_low));
                prop_assert!(est.draw_values.contains(&est.hdi_high));
            }
        }
    }
}
