//! Attribute-weight recovery from binary choices.
//!
//! `P(A) = logistic(w0 + sum_i w_i d_i)` with independent `N(0, prior_sd^2)`
//! priors on every coefficient, intercept included. The fit is the posterior
//! mode, found with damped Newton steps on the penalized log-likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ChoicePair, DecisionContext, ATTRIBUTE_COUNT};

pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 100;
const MAX_HALVINGS: usize = 50;

/// One choice as normalized option differences plus the outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub d: Vec<f64>,
    pub selected_a: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    /// Intercept first, then one slope per column.
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
}

impl WeightFit {
    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.coefficients[1..]
    }

    pub fn slope_errors(&self) -> &[f64] {
        &self.standard_errors[1..]
    }
}

/// `d_i = (a_i - b_i) / (range_max_i - range_min_i)`.
pub fn compute_diffs(pair: &ChoicePair, context: &DecisionContext) -> Result<[f64; ATTRIBUTE_COUNT]> {
    let a = pair.option_a.values_for(context)?;
    let b = pair.option_b.values_for(context)?;
    let mut d = [0.0; ATTRIBUTE_COUNT];
    for (i, spec) in context.attributes.iter().enumerate() {
        d[i] = (a[i] - b[i]) / spec.width();
    }
    Ok(d)
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::subject::logistic(x)
}

fn linear_predictor(row: &DiffRow, w: &[f64]) -> f64 {
    w[0] + row.d.iter().zip(&w[1..]).map(|(d, c)| d * c).sum::<f64>()
}

/// Log posterior up to a constant.
pub fn penalized_objective(rows: &[DiffRow], w: &[f64], prior_sd: f64) -> f64 {
    let ll: f64 = rows
        .iter()
        .map(|r| {
            let eta = linear_predictor(r, w);
            if r.selected_a {
                -softplus(-eta)
            } else {
                -softplus(eta)
            }
        })
        .sum();
    ll - w.iter().map(|c| c * c).sum::<f64>() / (2.0 * prior_sd * prior_sd)
}

pub fn penalized_gradient(rows: &[DiffRow], w: &[f64], prior_sd: f64) -> Vec<f64> {
    let inv_var = 1.0 / (prior_sd * prior_sd);
    let mut g: Vec<f64> = w.iter().map(|c| -c * inv_var).collect();
    for r in rows {
        let resid = if r.selected_a { 1.0 } else { 0.0 } - sigmoid(linear_predictor(r, w));
        g[0] += resid;
        for (gi, d) in g[1..].iter_mut().zip(&r.d) {
            *gi += resid * d;
        }
    }
    g
}

/// Negative Hessian of the log posterior (positive definite).
fn curvature(rows: &[DiffRow], w: &[f64], prior_sd: f64) -> DMatrix<f64> {
    let p = w.len();
    let mut h = DMatrix::<f64>::identity(p, p) / (prior_sd * prior_sd);
    let mut z = vec![0.0; p];
    for r in rows {
        let mu = sigmoid(linear_predictor(r, w));
        let v = mu * (1.0 - mu);
        z[0] = 1.0;
        z[1..].copy_from_slice(&r.d);
        for i in 0..p {
            let zi = z[i] * v;
            for j in 0..=i {
                h[(i, j)] += zi * z[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            h[(j, i)] = h[(i, j)];
        }
    }
    h
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Posterior mode of the logistic model under `N(0, prior_sd^2)` priors.
///
/// Stops when the gradient max-norm drops to [`GRADIENT_TOLERANCE`] or after
/// [`MAX_ITERATIONS`] Newton steps; `converged` reports which.
pub fn fit_logistic(rows: &[DiffRow], prior_sd: f64) -> Result<WeightFit> {
    if rows.is_empty() {
        return Err(Error::domain("fit_logistic needs at least one row"));
    }
    if !(prior_sd.is_finite() && prior_sd > 0.0) {
        return Err(Error::domain(format!("prior_sd must be positive, got {prior_sd}")));
    }
    let k = rows[0].d.len();
    for (i, r) in rows.iter().enumerate() {
        if r.d.len() != k {
            return Err(Error::domain(format!(
                "row {i} has {} columns, expected {k}",
                r.d.len()
            )));
        }
        if r.d.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain(format!("row {i} has a non-finite difference")));
        }
    }

    let p = k + 1;
    let mut w = vec![0.0; p];
    let mut objective = penalized_objective(rows, &w, prior_sd);
    let mut gradient = penalized_gradient(rows, &w, prior_sd);
    let mut iterations = 0;

    while max_norm(&gradient) > GRADIENT_TOLERANCE && iterations < MAX_ITERATIONS {
        iterations += 1;
        let h = curvature(rows, &w, prior_sd);
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::domain("curvature matrix is not positive definite"))?;
        let step = chol.solve(&DVector::from_column_slice(&gradient));

        // near the optimum the gain drops below the objective's rounding error
        let slack = 64.0 * f64::EPSILON * objective.abs().max(1.0);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = w.iter().zip(step.iter()).map(|(a, s)| a + scale * s).collect();
            let value = penalized_objective(rows, &trial, prior_sd);
            if value >= objective - slack {
                w = trial;
                objective = value;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        gradient = penalized_gradient(rows, &w, prior_sd);
        if !accepted {
            break;
        }
    }

    let final_gradient_norm = max_norm(&gradient);
    let standard_errors = match curvature(rows, &w, prior_sd).cholesky() {
        Some(chol) => chol.inverse().diagonal().iter().map(|v| v.sqrt()).collect(),
        None => vec![f64::NAN; p],
    };
    let converged = final_gradient_norm <= GRADIENT_TOLERANCE;
    if !converged {
        log::warn!(
            "logistic fit stopped after {iterations} iterations with gradient norm {final_gradient_norm:e}"
        );
    }
    Ok(WeightFit {
        coefficients: w,
        standard_errors,
        converged,
        iterations,
        final_gradient_norm,
    })
}

/// Rescales to sample mean 0 and sample standard deviation 1.
pub fn standardize(values: &[f64], series: &str) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::domain(format!(
            "series {series} needs at least 2 values to standardize"
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::domain(format!("series {series} has zero variance")));
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}
