//! Least-squares baselines and information criteria.
//!
//! All models are scored on the same effective sample, time points
//! `lags..T`, so that MSE, AIC and BIC are commensurable. MSE is the mean
//! squared one-step-ahead prediction error pooled over locations and time;
//! `n_obs = n T_eff`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::metrics::prediction_sse;
use crate::model::PanelData;
use crate::optimize::FitResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criteria {
    pub aic: f64,
    pub bic: f64,
}

/// `AIC = -2 l + 2 p`, `BIC = -2 l + ln(n_obs) p`.
pub fn information_criteria(loglik: f64, n_params: usize, n_obs: usize) -> Result<Criteria> {
    if n_obs < 1 {
        return Err(Error::Domain("n_obs must be at least 1".into()));
    }
    let p = n_params as f64;
    Ok(Criteria { aic: -2.0 * loglik + 2.0 * p, bic: -2.0 * loglik + (n_obs as f64).ln() * p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub model: String,
    /// One row of coefficients per location.
    pub coefficients: DMatrix<f64>,
    pub sigma2: f64,
    pub mse: f64,
    pub loglik: f64,
    pub n_params: usize,
    pub n_obs: usize,
    pub criteria: Criteria,
    /// Some equation's design was rank deficient; a pseudo-inverse
    /// solution was used.
    pub rank_deficient: bool,
}

/// Least squares via SVD; returns the minimum-norm solution and whether
/// the design was rank deficient.
fn least_squares(design: &DMatrix<f64>, target: &DVector<f64>) -> (DVector<f64>, bool) {
    let p = design.ncols();
    if p == 0 {
        return (DVector::zeros(0), false);
    }
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let tol = smax * 1e-10 * (design.nrows().max(p) as f64);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let coef = svd.solve(target, tol).unwrap_or_else(|_| DVector::zeros(p));
    (coef, rank < p)
}

fn gaussian_profile_loglik(sse: f64, n_obs: usize) -> f64 {
    let n = n_obs as f64;
    let sigma2 = sse / n;
    -0.5 * n * ((2.0 * PI * sigma2).ln() + 1.0)
}

/// Equation-by-equation least squares, one design row per effective time.
fn per_equation<F>(panel: &PanelData, lags: usize, width: usize, name: &str, row: F) -> Result<BaselineFit>
where
    F: Fn(usize, usize, &mut [f64]),
{
    panel.check_lags(lags)?;
    let n = panel.n();
    let times: Vec<usize> = (lags..panel.t()).collect();
    let mut coefficients = DMatrix::zeros(n, width);
    let mut sse = 0.0;
    let mut rank_deficient = false;
    for i in 0..n {
        let mut design = DMatrix::zeros(times.len(), width);
        let mut buf = vec![0.0; width];
        for (r, &t) in times.iter().enumerate() {
            row(i, t, &mut buf);
            for (c, v) in buf.iter().enumerate() {
                design[(r, c)] = *v;
            }
        }
        let target = DVector::from_fn(times.len(), |r, _| panel.y()[(i, times[r])]);
        let (coef, deficient) = least_squares(&design, &target);
        rank_deficient |= deficient;
        sse += (&design * &coef - &target).norm_squared();
        coefficients.set_row(i, &coef.transpose());
    }
    if rank_deficient {
        log::warn!("{name}: rank-deficient design, using the minimum-norm solution");
    }
    let n_obs = n * times.len();
    let n_params = n * width + 1;
    let loglik = gaussian_profile_loglik(sse, n_obs);
    Ok(BaselineFit {
        model: name.to_string(),
        coefficients,
        sigma2: sse / n_obs as f64,
        mse: sse / n_obs as f64,
        loglik,
        n_params,
        n_obs,
        criteria: information_criteria(loglik, n_params, n_obs)?,
        rank_deficient,
    })
}

/// Per-location regression of `y_t` on `X_t` alone (no lags, no spatial
/// term), scored on `t = lags..T`. Parameters: `n k` coefficients plus a
/// common variance.
pub fn fit_ols(panel: &PanelData, lags: usize) -> Result<BaselineFit> {
    let k = panel.k();
    per_equation(panel, lags, k, "OLS", |i, t, buf| {
        for l in 0..k {
            buf[l] = panel.x()[t][(i, l)];
        }
    })
}

/// Unrestricted VAR(1) with each location's own regressors:
/// `y_it = sum_j a_ij y_j,t-1 + x_it' b_i + e_it`. Parameters:
/// `n^2 + n k` coefficients plus a common variance.
pub fn fit_var1(panel: &PanelData) -> Result<BaselineFit> {
    let (n, k) = (panel.n(), panel.k());
    if panel.t() < n + k + 2 {
        return Err(Error::Domain(format!(
            "VAR(1) needs T >= n + k + 2 = {}, got {}",
            n + k + 2,
            panel.t()
        )));
    }
    per_equation(panel, 1, n + k, "VAR(1)", |i, t, buf| {
        for j in 0..n {
            buf[j] = panel.y()[(j, t - 1)];
        }
        for l in 0..k {
            buf[n + l] = panel.x()[t][(i, l)];
        }
    })
}

/// One row of the model comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub mse: f64,
    pub aic: f64,
    pub bic: f64,
    pub loglik: f64,
    pub n_params: usize,
}

impl From<&BaselineFit> for ComparisonRow {
    fn from(b: &BaselineFit) -> Self {
        Self {
            model: b.model.clone(),
            mse: b.mse,
            aic: b.criteria.aic,
            bic: b.criteria.bic,
            loglik: b.loglik,
            n_params: b.n_params,
        }
    }
}

/// Comparison row for a penalized fit: one-step-ahead MSE, its exact
/// log-likelihood, and `|support| + 1` parameters.
pub fn spatiotemporal_row(fit: &FitResult, panel: &PanelData) -> Result<ComparisonRow> {
    let sse = prediction_sse(&fit.params, panel)?;
    let n_obs = panel.n() * (panel.t() - fit.params.lags());
    let n_params = fit.active_sets.len() + 1;
    let c = information_criteria(fit.loglik, n_params, n_obs)?;
    Ok(ComparisonRow {
        model: "Spatiotemporal".into(),
        mse: sse / n_obs as f64,
        aic: c.aic,
        bic: c.bic,
        loglik: fit.loglik,
        n_params,
    })
}

/// Spatiotemporal, VAR(1) and OLS rows, in that order.
pub fn compare_models(fit: &FitResult, panel: &PanelData) -> Result<Vec<ComparisonRow>> {
    let lags = fit.params.lags();
    let st = spatiotemporal_row(fit, panel)?;
    let var = fit_var1(panel)?;
    let ols = fit_ols(panel, lags)?;
    if lags != 1 {
        log::warn!("VAR(1) is scored on t >= 1 while the other models use t >= {lags}");
    }
    Ok(vec![st, ComparisonRow::from(&var), ComparisonRow::from(&ols)])
}

/// CSV with columns `model,mse,aic,bic,loglik,n_params`.
pub fn write_comparison<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
