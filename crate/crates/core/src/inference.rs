//! Post-selection inference: unpenalized refit on the selected support,
//! numerical observed information, Wald standard errors.
//!
//! Standard errors are conditional on the selected support; no
//! selective-inference correction is applied. The information matrix is
//! the Hessian of the *negative* log-likelihood.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, PanelData, ParamGroup, ParamLayout, ParamVector};
use crate::optimize::{fit_with_support, nll_eval, CrossProducts, FitResult, InitStrategy, PenaltyConfig, SolverOptions, Support};

pub use crate::model::precision_diagnostic;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Coordinates with `|value| > tau`; everything else is frozen at zero in
/// the refit.
pub fn support(params: &ModelParams, tau: f64) -> Result<Support> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("tau = {tau} must be nonnegative")));
    }
    Ok(Support::from_params(params, tau))
}

/// Maximizes the unpenalized likelihood over `support` under the same
/// constraints as the penalized fit.
pub fn refit_unpenalized(panel: &PanelData, support: &Support, opts: &SolverOptions) -> Result<FitResult> {
    let opts = SolverOptions { zero_threshold: 0.0, ..opts.clone() };
    fit_with_support(panel, &PenaltyConfig::default(), &opts, Some(support))
}

/// Central-difference Hessian of `f` at `theta` with per-coordinate steps.
/// Diagonal entries use the three-point formula, off-diagonal entries the
/// four-point formula; the result is symmetric by construction.
pub fn numerical_hessian<F>(f: F, theta: &[f64], steps: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let d = theta.len();
    if steps.len() != d {
        return Err(Error::Dimension(format!("{} steps for {d} coordinates", steps.len())));
    }
    if let Some(i) = steps.iter().position(|&h| !(h > 0.0)) {
        return Err(Error::Domain(format!("step {i} must be positive")));
    }
    let eval = |shifts: &[(usize, f64)], coordinate: usize| -> Result<f64> {
        let mut x = theta.to_vec();
        for &(i, s) in shifts {
            x[i] += s;
        }
        match f(&x) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(v) => Err(Error::Stencil { coordinate, message: format!("objective is {v}") }),
            Err(e) => Err(Error::Stencil { coordinate, message: e.to_string() }),
        }
    };
    let f0 = eval(&[], 0)?;
    // single-coordinate stencils first, so a failure names its own coordinate
    let diagonal: Vec<Result<f64>> = (0..d)
        .into_par_iter()
        .map(|i| {
            let hi = steps[i];
            let up = eval(&[(i, hi)], i)?;
            let down = eval(&[(i, -hi)], i)?;
            Ok((up - 2.0 * f0 + down) / (hi * hi))
        })
        .collect();
    let diagonal: Vec<f64> = diagonal.into_iter().collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
    let mixed: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (hi, hj) = (steps[i], steps[j]);
            let pp = eval(&[(i, hi), (j, hj)], j)?;
            let pm = eval(&[(i, hi), (j, -hj)], j)?;
            let mp = eval(&[(i, -hi), (j, hj)], j)?;
            let mm = eval(&[(i, -hi), (j, -hj)], j)?;
            Ok((pp - pm - mp + mm) / (4.0 * hi * hj))
        })
        .collect();
    let mixed: Vec<f64> = mixed.into_iter().collect::<Result<_>>()?;
    let mut h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diagonal));
    for (&(i, j), v) in pairs.iter().zip(mixed) {
        h[(i, j)] = v;
        h[(j, i)] = v;
    }
    Ok(h)
}

/// Default steps `eps^(1/4) max(|theta_i|, 1)`, which balance the
/// truncation error of the second difference against rounding in `f`.
pub fn default_steps(theta: &[f64]) -> Vec<f64> {
    let base = f64::EPSILON.powf(0.25);
    theta.iter().map(|v| base * v.abs().max(1.0)).collect()
}

/// Observed information over a set of flat coordinates.
#[derive(Debug, Clone)]
pub struct Information {
    pub layout: ParamLayout,
    /// Flat [`ParamVector`] indices of the rows/columns of `matrix`.
    pub indices: Vec<usize>,
    pub matrix: DMatrix<f64>,
    /// Support coordinates left out because they sit on a constraint
    /// boundary.
    pub excluded: Vec<usize>,
}

/// Support coordinates at a bound: zero weights or temporal coefficients,
/// weights in a row at the row-sum cap, temporal coefficients at one.
fn boundary_coordinates(params: &ModelParams, support: &Support, row_slack: f64) -> Vec<usize> {
    let layout = params.layout();
    let mut out = Vec::new();
    for idx in support.indices() {
        let at_bound = match layout.group(idx) {
            ParamGroup::Weight => {
                let (i, j) = layout.w_entry(idx);
                let row: f64 = params.w.row(i).sum();
                params.w[(i, j)] <= 0.0 || row >= 1.0 - row_slack - 1e-12
            }
            ParamGroup::Phi => {
                let offset = idx - layout.k;
                let v = params.phi[(offset / layout.n, offset % layout.n)];
                v <= 0.0 || v >= 1.0
            }
            ParamGroup::Beta | ParamGroup::Sigma2 => false,
        };
        if at_bound {
            out.push(idx);
        }
    }
    out
}

/// Numerical Hessian of `-ln L` over the support coordinates plus `sigma2`,
/// skipping boundary coordinates (Wald inference is invalid there).
pub fn observed_information(
    params: &ModelParams,
    panel: &PanelData,
    support: &Support,
    row_slack: f64,
) -> Result<Information> {
    params.check_panel(panel)?;
    let layout = params.layout();
    if support.layout != layout {
        return Err(Error::Dimension("support and params disagree on the layout".into()));
    }
    let excluded = boundary_coordinates(params, support, row_slack);
    for &idx in &excluded {
        log::warn!("{} is on a constraint boundary and is excluded from the Hessian", layout.name(idx));
    }
    let mut indices: Vec<usize> = support.indices().into_iter().filter(|i| !excluded.contains(i)).collect();
    indices.push(layout.sigma2());

    let stats = CrossProducts::new(panel, &[0..panel.t()], params.lags())?;
    let base = ParamVector::pack(params);
    let theta: Vec<f64> = indices.iter().map(|&i| base.values[i]).collect();
    let nll = |x: &[f64]| -> Result<f64> {
        let mut v = base.values.clone();
        for (&i, &xi) in indices.iter().zip(x) {
            v[i] = xi;
        }
        let p = ParamVector::from_values(layout, v)?.unpack();
        if !(p.sigma2 > 0.0) {
            return Err(Error::Domain("sigma2 left the positive half-line".into()));
        }
        nll_eval(&stats, &p.w, &p.phi, &p.beta, p.sigma2)
            .map(|e| e.nll)
            .ok_or(Error::Singular { det: 0.0 })
    };
    let mut steps = default_steps(&theta);
    // keep the variance stencil on the positive half-line
    let last = steps.len() - 1;
    steps[last] = steps[last].min(0.5 * theta[last]);
    let matrix = numerical_hessian(nll, &theta, &steps).map_err(|e| match e {
        Error::Stencil { coordinate, message } => Error::Stencil {
            coordinate: indices[coordinate],
            message: format!("{}: {message}", layout.name(indices[coordinate])),
        },
        other => other,
    })?;
    Ok(Information { layout, indices, matrix, excluded })
}

/// Wald quantities from an information matrix (Hessian of `-ln L`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldSummary {
    /// `None` everywhere when the information is not positive definite.
    pub se: Vec<Option<f64>>,
    pub z: Vec<Option<f64>>,
    pub ci_lower: Vec<Option<f64>>,
    pub ci_upper: Vec<Option<f64>>,
    pub hessian_ok: bool,
}

pub fn standard_errors(information: &DMatrix<f64>, estimates: &[f64]) -> Result<WaldSummary> {
    let d = estimates.len();
    if information.shape() != (d, d) {
        return Err(Error::Dimension(format!(
            "information is {:?}, expected {d}x{d}",
            information.shape()
        )));
    }
    let cov = information.clone().cholesky().map(|c| c.inverse());
    let se: Option<Vec<f64>> = cov.and_then(|c| {
        let se: Vec<f64> = (0..d).map(|i| c[(i, i)].sqrt()).collect();
        se.iter().all(|s| s.is_finite() && *s > 0.0).then_some(se)
    });
    let Some(se) = se else {
        return Ok(WaldSummary {
            se: vec![None; d],
            z: vec![None; d],
            ci_lower: vec![None; d],
            ci_upper: vec![None; d],
            hessian_ok: false,
        });
    };
    Ok(WaldSummary {
        z: estimates.iter().zip(&se).map(|(e, s)| Some(e / s)).collect(),
        ci_lower: estimates.iter().zip(&se).map(|(e, s)| Some(e - Z_95 * s)).collect(),
        ci_upper: estimates.iter().zip(&se).map(|(e, s)| Some(e + Z_95 * s)).collect(),
        se: se.into_iter().map(Some).collect(),
        hessian_ok: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRow {
    pub parameter: String,
    pub group: ParamGroup,
    pub index: usize,
    pub estimate: f64,
    pub se: Option<f64>,
    pub z: Option<f64>,
    pub lcl: Option<f64>,
    pub ucl: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Refit parameters, zero outside the support.
    pub estimates: ModelParams,
    pub rows: Vec<InferenceRow>,
    pub hessian_ok: bool,
    /// Names of support coordinates excluded for sitting on a bound.
    pub excluded: Vec<String>,
    pub refit_loglik: f64,
}

impl InferenceResult {
    /// CSV with columns `parameter,group,estimate,se,z,lcl,ucl`; missing
    /// standard errors are left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["parameter", "group", "estimate", "se", "z", "lcl", "ucl"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            wtr.write_record([
                r.parameter.clone(),
                r.group.as_str().to_string(),
                r.estimate.to_string(),
                opt(r.se),
                opt(r.z),
                opt(r.lcl),
                opt(r.ucl),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Selects the support of a penalized estimate, refits without penalty
/// (starting from the penalized estimate) and attaches Wald statistics.
pub fn infer(panel: &PanelData, penalized: &ModelParams, opts: &SolverOptions, tau: f64) -> Result<InferenceResult> {
    let support = support(penalized, tau)?;
    let opts = SolverOptions { lags: penalized.lags(), init: InitStrategy::Given(penalized.clone()), ..opts.clone() };
    let refit = refit_unpenalized(panel, &support, &opts)?;
    let info = observed_information(&refit.params, panel, &support, opts.delta_row)?;
    let packed = ParamVector::pack(&refit.params);
    let estimates: Vec<f64> = info.indices.iter().map(|&i| packed.values[i]).collect();
    let wald = standard_errors(&info.matrix, &estimates)?;
    let rows = info
        .indices
        .iter()
        .enumerate()
        .map(|(a, &idx)| InferenceRow {
            parameter: info.layout.name(idx),
            group: info.layout.group(idx),
            index: idx,
            estimate: estimates[a],
            se: wald.se[a],
            z: wald.z[a],
            lcl: wald.ci_lower[a],
            ucl: wald.ci_upper[a],
        })
        .collect();
    Ok(InferenceResult {
        estimates: refit.params,
        rows,
        hessian_ok: wald.hessian_ok,
        excluded: info.excluded.iter().map(|&i| info.layout.name(i)).collect(),
        refit_loglik: refit.loglik,
    })
}
