use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{one_step_predictions, ModelParams, PanelData};

/// Mean bias, mean absolute error and root mean squared error of a set of
/// deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub bias: f64,
    pub mae: f64,
    pub rmse: f64,
}

impl Moments {
    fn of(diffs: &[f64]) -> Self {
        let m = diffs.len() as f64;
        Self {
            bias: diffs.iter().sum::<f64>() / m,
            mae: diffs.iter().map(|d| d.abs()).sum::<f64>() / m,
            rmse: (diffs.iter().map(|d| d * d).sum::<f64>() / m).sqrt(),
        }
    }
}

/// Table-1 rows. `w_zero` and `w_nonzero` are absent when the true weight
/// matrix has no entries of that kind; `beta` is absent when `k = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub beta: Option<Moments>,
    pub phi: Moments,
    pub w_all: Moments,
    pub w_zero: Option<Moments>,
    pub w_nonzero: Option<Moments>,
    pub sigma: Moments,
}

/// Pools deviations over replications: every estimate contributes all
/// entries of a group, so each moment divides by `m` times the group size
/// (`k`, `n P`, `n^2 - n`, or 1 for `sigma2`).
pub fn group_metrics(estimates: &[ModelParams], truth: &ModelParams) -> Result<GroupMetrics> {
    if estimates.is_empty() {
        return Err(Error::Domain("no estimates to summarize".into()));
    }
    let layout = truth.layout();
    if let Some(bad) = estimates.iter().position(|e| e.layout() != layout) {
        return Err(Error::Dimension(format!("estimate {bad} has a different shape from the truth")));
    }
    let n = truth.n();
    let mut beta = Vec::new();
    let mut phi = Vec::new();
    let (mut w_all, mut w_zero, mut w_nonzero) = (Vec::new(), Vec::new(), Vec::new());
    let mut sigma = Vec::new();
    for est in estimates {
        beta.extend(est.beta.iter().zip(truth.beta.iter()).map(|(a, b)| a - b));
        phi.extend(est.phi.iter().zip(truth.phi.iter()).map(|(a, b)| a - b));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d = est.w[(i, j)] - truth.w[(i, j)];
                w_all.push(d);
                if truth.w[(i, j)] == 0.0 {
                    w_zero.push(d);
                } else {
                    w_nonzero.push(d);
                }
            }
        }
        sigma.push(est.sigma2 - truth.sigma2);
    }
    let nonempty = |v: &[f64]| (!v.is_empty()).then(|| Moments::of(v));
    Ok(GroupMetrics {
        beta: nonempty(&beta),
        phi: Moments::of(&phi),
        w_all: Moments::of(&w_all),
        w_zero: nonempty(&w_zero),
        w_nonzero: nonempty(&w_nonzero),
        sigma: Moments::of(&sigma),
    })
}

/// Full-model RMSE `sqrt((1 / (n m)) sum_i (Y_hat_i - Y_i)'(Y_hat_i - Y_i))`
/// where each `Y_i` stacks the effective time points of replication `i`
/// and `Y_hat_i` the one-step-ahead predictions. As written, the squared
/// errors are summed over time but only divided by `n m`, so the value
/// scales with `sqrt(T_eff)`.
pub fn full_model_rmse(fits: &[ModelParams], panels: &[PanelData]) -> Result<f64> {
    if fits.len() != panels.len() {
        return Err(Error::Dimension(format!("{} fits for {} panels", fits.len(), panels.len())));
    }
    if fits.is_empty() {
        return Err(Error::Domain("no replications".into()));
    }
    let n = panels[0].n();
    let mut total = 0.0;
    for (params, panel) in fits.iter().zip(panels) {
        if panel.n() != n {
            return Err(Error::Dimension("panels differ in the number of locations".into()));
        }
        total += prediction_sse(params, panel)?;
    }
    Ok((total / (n * fits.len()) as f64).sqrt())
}

/// Sum of squared one-step-ahead prediction errors over `t = P..T`.
pub fn prediction_sse(params: &ModelParams, panel: &PanelData) -> Result<f64> {
    let times: Vec<usize> = (params.lags()..panel.t()).collect();
    let pred = one_step_predictions(params, panel, &times)?;
    let mut sse = 0.0;
    for (c, &t) in times.iter().enumerate() {
        for i in 0..panel.n() {
            sse += (pred[(i, c)] - panel.y()[(i, t)]).powi(2);
        }
    }
    Ok(sse)
}
