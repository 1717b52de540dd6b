//! Model types and likelihood evaluation for the spatiotemporal dynamic panel
//!
//! ```text
//! y_t = X_t beta + sum_p Phi_p y_{t-p} + W y_t + eps_t,   eps_t ~ N(0, sigma2 I)
//! ```
//!
//! with diagonal `Phi_p` and an unknown weight matrix `W` (zero diagonal).
//! The likelihood is conditional on the first `P` observations, so every
//! term uses the effective sample `T_eff = T - P`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::PenaltyConfig;

/// Determinants of `I - W` below this magnitude are treated as singular.
pub const DET_TOL: f64 = 1e-12;

/// Responses `y` (n locations x T time points) and one n x k regressor
/// matrix per time point.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    y: DMatrix<f64>,
    x: Vec<DMatrix<f64>>,
    k: usize,
}

impl PanelData {
    pub fn new(y: DMatrix<f64>, x: Vec<DMatrix<f64>>) -> Result<Self> {
        let (n, t) = y.shape();
        if n < 2 {
            return Err(Error::Domain(format!("panel needs at least 2 locations, got {n}")));
        }
        if x.len() != t {
            return Err(Error::Dimension(format!(
                "{} regressor matrices for {t} time points",
                x.len()
            )));
        }
        let k = x.first().map_or(0, |m| m.ncols());
        for (i, xt) in x.iter().enumerate() {
            if xt.shape() != (n, k) {
                return Err(Error::Dimension(format!(
                    "X_{i} has shape {:?}, expected ({n}, {k})",
                    xt.shape()
                )));
            }
        }
        if y.iter().chain(x.iter().flat_map(|m| m.iter())).any(|v| !v.is_finite()) {
            return Err(Error::Domain("panel contains missing or non-finite values".into()));
        }
        Ok(Self { y, x, k })
    }

    /// Panel with `k = 0` regressors.
    pub fn without_regressors(y: DMatrix<f64>) -> Result<Self> {
        let (n, t) = y.shape();
        Self::new(y, vec![DMatrix::zeros(n, 0); t])
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn t(&self) -> usize {
        self.y.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn x(&self) -> &[DMatrix<f64>] {
        &self.x
    }

    /// Requires `T >= lags + 2` so at least two residual columns exist.
    pub fn check_lags(&self, lags: usize) -> Result<()> {
        if self.t() < lags + 2 {
            return Err(Error::Domain(format!(
                "panel has T = {} time points, need at least {} for lag order {lags}",
                self.t(),
                lags + 2
            )));
        }
        Ok(())
    }

    /// Relabels locations: location `perm[i]` of `self` becomes location `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n())?;
        let y = DMatrix::from_fn(self.n(), self.t(), |i, t| self.y[(perm[i], t)]);
        let x = self
            .x
            .iter()
            .map(|xt| DMatrix::from_fn(self.n(), self.k, |i, l| xt[(perm[i], l)]))
            .collect();
        Self::new(y, x)
    }
}

/// Model parameters. `phi[(p, i)]` is the lag-(p+1) coefficient of location `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub phi: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub sigma2: f64,
}

impl ModelParams {
    pub fn new(beta: DVector<f64>, phi: DMatrix<f64>, w: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let n = w.nrows();
        if w.ncols() != n {
            return Err(Error::Dimension(format!("W must be square, got {:?}", w.shape())));
        }
        if phi.ncols() != n {
            return Err(Error::Dimension(format!(
                "phi has {} columns for {n} locations",
                phi.ncols()
            )));
        }
        Ok(Self { beta, phi, w, sigma2 })
    }

    pub fn zeros(n: usize, k: usize, lags: usize, sigma2: f64) -> Self {
        Self {
            beta: DVector::zeros(k),
            phi: DMatrix::zeros(lags, n),
            w: DMatrix::zeros(n, n),
            sigma2,
        }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn k(&self) -> usize {
        self.beta.len()
    }

    pub fn lags(&self) -> usize {
        self.phi.nrows()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.n(), self.k(), self.lags())
    }

    /// Lists every violated invariant. `row_slack` is the required gap
    /// below 1 for row sums of `W`.
    pub fn invariant_violations(&self, row_slack: f64, tol: f64) -> Vec<String> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            if self.w[(i, i)] != 0.0 {
                out.push(format!("w[{i},{i}] = {} is not zero", self.w[(i, i)]));
            }
            let mut row = 0.0;
            for j in 0..n {
                let v = self.w[(i, j)];
                if !v.is_finite() || v < -tol {
                    out.push(format!("w[{i},{j}] = {v} is negative"));
                }
                row += v;
            }
            if row > 1.0 - row_slack + tol {
                out.push(format!("row {i} of W sums to {row}"));
            }
        }
        for ((p, i), &v) in indexed(&self.phi) {
            if !v.is_finite() || v < -tol || v > 1.0 + tol {
                out.push(format!("phi[{p},{i}] = {v} outside [0, 1]"));
            }
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            out.push(format!("sigma2 = {} is not positive", self.sigma2));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            out.push("beta has non-finite entries".into());
        }
        out
    }

    /// Same relabeling rule as [`PanelData::permuted`].
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        check_permutation(perm, n)?;
        Ok(Self {
            beta: self.beta.clone(),
            phi: DMatrix::from_fn(self.lags(), n, |p, i| self.phi[(p, perm[i])]),
            w: DMatrix::from_fn(n, n, |i, j| self.w[(perm[i], perm[j])]),
            sigma2: self.sigma2,
        })
    }

    pub fn check_panel(&self, panel: &PanelData) -> Result<()> {
        if panel.n() != self.n() || panel.k() != self.k() {
            return Err(Error::Dimension(format!(
                "params are for n = {}, k = {} but panel has n = {}, k = {}",
                self.n(),
                self.k(),
                panel.n(),
                panel.k()
            )));
        }
        if panel.t() <= self.lags() {
            return Err(Error::Dimension(format!(
                "panel has T = {} but lag order is {}",
                panel.t(),
                self.lags()
            )));
        }
        Ok(())
    }
}

fn indexed(m: &DMatrix<f64>) -> impl Iterator<Item = ((usize, usize), &f64)> {
    let rows = m.nrows();
    m.iter().enumerate().map(move |(idx, v)| ((idx % rows, idx / rows), v))
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Dimension(format!("permutation of length {} for n = {n}", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Domain("not a permutation".into()));
        }
    }
    Ok(())
}

/// Shape of the flat parameter vector.
///
/// Ordering: `beta` (k), then `phi` lag-major (`phi[p][i]` at `k + p*n + i`),
/// then the off-diagonal entries of `W` row-major with the diagonal skipped,
/// then `sigma2`. For `P = 1` the length `k + n^2 + 1` coincides with the
/// usual parameter count of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub n: usize,
    pub k: usize,
    pub lags: usize,
}

impl ParamLayout {
    pub fn new(n: usize, k: usize, lags: usize) -> Self {
        Self { n, k, lags }
    }

    pub fn len(&self) -> usize {
        self.k + self.lags * self.n + self.n * (self.n - 1) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self, l: usize) -> usize {
        l
    }

    pub fn phi(&self, p: usize, i: usize) -> usize {
        self.k + p * self.n + i
    }

    /// Index of `w[i][j]`, `None` on the diagonal.
    pub fn w(&self, i: usize, j: usize) -> Option<usize> {
        if i == j {
            return None;
        }
        let col = if j < i { j } else { j - 1 };
        Some(self.w_offset() + i * (self.n - 1) + col)
    }

    pub fn w_offset(&self) -> usize {
        self.k + self.lags * self.n
    }

    pub fn sigma2(&self) -> usize {
        self.len() - 1
    }

    /// Inverse of [`ParamLayout::w`].
    pub fn w_entry(&self, idx: usize) -> (usize, usize) {
        let r = idx - self.w_offset();
        let i = r / (self.n - 1);
        let c = r % (self.n - 1);
        (i, if c < i { c } else { c + 1 })
    }

    /// Which group a flat index belongs to.
    pub fn group(&self, idx: usize) -> ParamGroup {
        if idx < self.k {
            ParamGroup::Beta
        } else if idx < self.w_offset() {
            ParamGroup::Phi
        } else if idx < self.sigma2() {
            ParamGroup::Weight
        } else {
            ParamGroup::Sigma2
        }
    }

    /// Human-readable name such as `beta[1]`, `phi1[3]`, `w[2,5]`, `sigma2`
    /// (indices are 1-based).
    pub fn name(&self, idx: usize) -> String {
        match self.group(idx) {
            ParamGroup::Beta => format!("beta[{}]", idx + 1),
            ParamGroup::Phi => {
                let r = idx - self.k;
                format!("phi{}[{}]", r / self.n + 1, r % self.n + 1)
            }
            ParamGroup::Weight => {
                let (i, j) = self.w_entry(idx);
                format!("w[{},{}]", i + 1, j + 1)
            }
            ParamGroup::Sigma2 => "sigma2".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Beta,
    Phi,
    Weight,
    Sigma2,
}

impl ParamGroup {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Beta => "beta",
            ParamGroup::Phi => "phi",
            ParamGroup::Weight => "w",
            ParamGroup::Sigma2 => "sigma2",
        }
    }
}

/// Flat parameter vector; see [`ParamLayout`] for the ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn pack(params: &ModelParams) -> Self {
        let layout = params.layout();
        let mut values = Vec::with_capacity(layout.len());
        values.extend(params.beta.iter());
        for p in 0..layout.lags {
            values.extend(params.phi.row(p).iter());
        }
        for i in 0..layout.n {
            for j in 0..layout.n {
                if i != j {
                    values.push(params.w[(i, j)]);
                }
            }
        }
        values.push(params.sigma2);
        Self { layout, values }
    }

    pub fn from_values(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Dimension(format!(
                "parameter vector has length {}, layout expects {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn unpack(&self) -> ModelParams {
        let ParamLayout { n, k, lags } = self.layout;
        let v = &self.values;
        let beta = DVector::from_column_slice(&v[..k]);
        let phi = DMatrix::from_fn(lags, n, |p, i| v[self.layout.phi(p, i)]);
        let w = DMatrix::from_fn(n, n, |i, j| self.layout.w(i, j).map_or(0.0, |idx| v[idx]));
        ModelParams { beta, phi, w, sigma2: v[self.layout.sigma2()] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `ln |det(I - W)|` via an LU factorization with partial pivoting.
pub fn log_det_term(w: &DMatrix<f64>) -> Result<f64> {
    let n = w.nrows();
    if w.ncols() != n {
        return Err(Error::Dimension(format!("W must be square, got {:?}", w.shape())));
    }
    let a = DMatrix::identity(n, n) - w;
    let lu = a.lu();
    let u = lu.u();
    let mut logdet = 0.0;
    for i in 0..n {
        let d = u[(i, i)].abs();
        if d == 0.0 || !d.is_finite() {
            return Err(Error::Singular { det: 0.0 });
        }
        logdet += d.ln();
    }
    if logdet < DET_TOL.ln() {
        return Err(Error::Singular { det: logdet.exp() });
    }
    Ok(logdet)
}

/// `eps_t = (I - W) y_t - X_t beta - sum_p Phi_p y_{t-p}` for `t = P+1..T`;
/// column `t - P - 1` (0-based) of the result holds `eps_t`.
pub fn residuals(params: &ModelParams, panel: &PanelData) -> Result<DMatrix<f64>> {
    params.check_panel(panel)?;
    let lags = params.lags();
    let times: Vec<usize> = (lags..panel.t()).collect();
    residuals_at(params, panel, &times)
}

/// Residuals at arbitrary 0-based time indices, each `>= P`.
pub(crate) fn residuals_at(
    params: &ModelParams,
    panel: &PanelData,
    times: &[usize],
) -> Result<DMatrix<f64>> {
    params.check_panel(panel)?;
    let n = params.n();
    let a = DMatrix::identity(n, n) - &params.w;
    let mut out = DMatrix::zeros(n, times.len());
    for (c, &t) in times.iter().enumerate() {
        let y = panel.y.column(t);
        let mut e = &a * y - &panel.x[t] * &params.beta;
        for p in 0..params.lags() {
            let lagged = panel.y.column(t - p - 1);
            for i in 0..n {
                e[i] -= params.phi[(p, i)] * lagged[i];
            }
        }
        out.set_column(c, &e);
    }
    Ok(out)
}

/// Conditional Gaussian log-likelihood with `T_eff = T - P`:
/// `T_eff ln|det(I-W)| - (n T_eff / 2) ln(2 pi sigma2) - SSR / (2 sigma2)`.
pub fn log_likelihood(params: &ModelParams, panel: &PanelData) -> Result<f64> {
    if !(params.sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma2 = {} must be positive", params.sigma2)));
    }
    let eps = residuals(params, panel)?;
    let t_eff = eps.ncols() as f64;
    let logdet = log_det_term(&params.w)?;
    Ok(gaussian_loglik(logdet, eps.norm_squared(), params.n() as f64 * t_eff, t_eff, params.sigma2))
}

pub(crate) fn gaussian_loglik(logdet: f64, ssr: f64, n_obs: f64, t_eff: f64, sigma2: f64) -> f64 {
    t_eff * logdet - 0.5 * n_obs * (2.0 * std::f64::consts::PI * sigma2).ln() - ssr / (2.0 * sigma2)
}

/// `lambda1 sum|w| + lambda2 sum|phi| + lambda3 sum|beta|`.
pub fn penalty_value(params: &ModelParams, pen: &PenaltyConfig) -> f64 {
    pen.lambda1 * params.w.iter().map(|v| v.abs()).sum::<f64>()
        + pen.lambda2 * params.phi.iter().map(|v| v.abs()).sum::<f64>()
        + pen.lambda3 * params.beta.iter().map(|v| v.abs()).sum::<f64>()
}

/// Penalized negative log-likelihood.
pub fn penalized_objective(params: &ModelParams, panel: &PanelData, pen: &PenaltyConfig) -> Result<f64> {
    pen.validate()?;
    Ok(-log_likelihood(params, panel)? + penalty_value(params, pen))
}

/// Outcome of [`stationarity_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    /// Spectral norm of `sum_p (I - W)^{-1} Phi_p` is below 1.
    pub stationary: bool,
    /// That spectral norm; `+inf` when `I - W` is singular.
    pub norm_value: f64,
    pub max_row_sum: f64,
    /// Largest per-location sum of temporal coefficients.
    pub max_lag_sum: f64,
    /// `max_row_sum < 1` and `max_lag_sum < 1`.
    pub sufficient_bounds: bool,
}

pub fn stationarity_check(params: &ModelParams) -> StationarityReport {
    let n = params.n();
    let max_row_sum = (0..n).map(|i| params.w.row(i).sum()).fold(f64::NEG_INFINITY, f64::max);
    let lag_sums = lag_sums(params);
    let max_lag_sum = lag_sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sufficient_bounds = max_row_sum < 1.0 && max_lag_sum < 1.0;
    let norm_value = match stationarity_operator(params) {
        Some(m) => spectral_norm(&m),
        None => f64::INFINITY,
    };
    StationarityReport {
        stationary: norm_value < 1.0,
        norm_value,
        max_row_sum,
        max_lag_sum,
        sufficient_bounds,
    }
}

pub(crate) fn lag_sums(params: &ModelParams) -> Vec<f64> {
    (0..params.n()).map(|i| params.phi.column(i).sum()).collect()
}

/// `(I - W)^{-1} diag(sum_p phi_p)`, or `None` if `I - W` is singular.
pub(crate) fn stationarity_operator(params: &ModelParams) -> Option<DMatrix<f64>> {
    let n = params.n();
    log_det_term(&params.w).ok()?;
    let inv = (DMatrix::identity(n, n) - &params.w).try_inverse()?;
    let sums = lag_sums(params);
    Some(DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * sums[j]))
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// One-step-ahead predictions `(I - W)^{-1} (X_t beta + sum_p Phi_p y_{t-p})`
/// using observed lags, at the given 0-based times (each `>= P`).
pub fn one_step_predictions(
    params: &ModelParams,
    panel: &PanelData,
    times: &[usize],
) -> Result<DMatrix<f64>> {
    params.check_panel(panel)?;
    let n = params.n();
    let lags = params.lags();
    if let Some(&t) = times.iter().find(|&&t| t < lags || t >= panel.t()) {
        return Err(Error::Dimension(format!("time index {t} has no full lag history")));
    }
    log_det_term(&params.w)?;
    let lu = (DMatrix::identity(n, n) - &params.w).lu();
    let mut out = DMatrix::zeros(n, times.len());
    for (c, &t) in times.iter().enumerate() {
        let mut rhs = &panel.x[t] * &params.beta;
        for p in 0..lags {
            for i in 0..n {
                rhs[i] += params.phi[(p, i)] * panel.y[(i, t - p - 1)];
            }
        }
        let y_hat = lu
            .solve(&rhs)
            .ok_or(Error::Singular { det: 0.0 })?;
        out.set_column(c, &y_hat);
    }
    Ok(out)
}

/// Precision matrix approximation `(1/sigma2) (I - W')(I - W)`, exact for
/// `Phi = 0` and a reasonable guide under weak temporal dependence. Zero
/// off-diagonal entries indicate conditional independence.
pub fn precision_diagnostic(params: &ModelParams) -> DMatrix<f64> {
    let n = params.n();
    let a = DMatrix::identity(n, n) - &params.w;
    (a.transpose() * a) / params.sigma2
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, n: usize, k: usize, lags: usize) -> ModelParams {
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    w[(i, j)] = rng.random::<f64>() * 0.8 / (n - 1) as f64;
                }
            }
        }
        ModelParams {
            beta: DVector::from_fn(k, |_, _| rng.random::<f64>() * 4.0 - 2.0),
            phi: DMatrix::from_fn(lags, n, |_, _| rng.random::<f64>() * 0.9 / lags as f64),
            w,
            sigma2: 0.5 + rng.random::<f64>(),
        }
    }

    fn random_panel(rng: &mut ChaCha8Rng, n: usize, t: usize, k: usize) -> PanelData {
        let y = DMatrix::from_fn(n, t, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let x = (0..t)
            .map(|_| DMatrix::from_fn(n, k, |_, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        PanelData::new(y, x).unwrap()
    }

    #[test]
    fn zero_params_leave_responses_as_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let panel = random_panel(&mut rng, 3, 6, 2);
        let params = ModelParams::zeros(3, 2, 2, 1.0);
        let eps = residuals(&params, &panel).unwrap();
        assert_eq!(eps, panel.y().columns(2, 4).into_owned());
    }

    #[test]
    fn residuals_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, t, k) = (2, 3, 2);
        let panel = random_panel(&mut rng, n, t, k);
        let params = random_params(&mut rng, n, k, 1);
        let eps = residuals(&params, &panel).unwrap();
        assert_eq!(eps.shape(), (2, 2));
        for tt in 1..t {
            for i in 0..n {
                let mut e = panel.y()[(i, tt)];
                for j in 0..n {
                    e -= params.w[(i, j)] * panel.y()[(j, tt)];
                }
                for l in 0..k {
                    e -= panel.x()[tt][(i, l)] * params.beta[l];
                }
                e -= params.phi[(0, i)] * panel.y()[(i, tt - 1)];
                assert!((eps[(i, tt - 1)] - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn residuals_reject_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let panel = random_panel(&mut rng, 3, 5, 2);
        let params = ModelParams::zeros(3, 1, 1, 1.0);
        assert!(matches!(residuals(&params, &panel), Err(Error::Dimension(_))));
        let params = ModelParams::zeros(3, 2, 5, 1.0);
        assert!(matches!(residuals(&params, &panel), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_weights_give_iid_gaussian_loglik() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let panel = random_panel(&mut rng, 3, 7, 2);
        let mut params = random_params(&mut rng, 3, 2, 1);
        params.w.fill(0.0);
        assert_eq!(log_det_term(&params.w).unwrap(), 0.0);
        let eps = residuals(&params, &panel).unwrap();
        let mut expected = 0.0;
        for e in eps.iter() {
            expected += -0.5 * (2.0 * std::f64::consts::PI * params.sigma2).ln()
                - e * e / (2.0 * params.sigma2);
        }
        assert_relative_eq!(log_likelihood(&params, &panel).unwrap(), expected, max_relative = 1e-12);
    }

    #[test]
    fn perfect_fit_leaves_only_normalizing_terms() {
        // y built so that every residual is exactly zero
        let n = 2;
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 0.25, 0.5, 0.0]);
        let params = ModelParams {
            beta: DVector::zeros(0),
            phi: DMatrix::zeros(1, n),
            w,
            sigma2: 2.0,
        };
        let panel = PanelData::without_regressors(DMatrix::zeros(2, 5)).unwrap();
        let ll = log_likelihood(&params, &panel).unwrap();
        let t_eff = 4.0;
        let expected = t_eff * (1.0f64 - 0.125).ln()
            - (n as f64 * t_eff / 2.0) * (2.0 * std::f64::consts::PI * 2.0).ln();
        assert_relative_eq!(ll, expected, max_relative = 1e-14);
    }

    #[test]
    fn log_likelihood_domain_errors() {
        let panel = PanelData::without_regressors(DMatrix::from_element(2, 4, 1.0)).unwrap();
        let mut params = ModelParams::zeros(2, 0, 1, 0.0);
        assert!(matches!(log_likelihood(&params, &panel), Err(Error::Domain(_))));
        params.sigma2 = 1.0;
        params.w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(log_likelihood(&params, &panel), Err(Error::Singular { .. })));
    }

    #[test]
    fn log_det_closed_forms() {
        assert_eq!(log_det_term(&DMatrix::zeros(4, 4)).unwrap(), 0.0);
        let (a, b) = (0.3, -1.7);
        let w = DMatrix::from_row_slice(2, 2, &[0.0, a, b, 0.0]);
        assert_relative_eq!(log_det_term(&w).unwrap(), (1.0f64 - a * b).abs().ln(), max_relative = 1e-14);
    }

    fn cofactor_det(m: &DMatrix<f64>) -> f64 {
        let n = m.nrows();
        if n == 1 {
            return m[(0, 0)];
        }
        (0..n)
            .map(|j| {
                let minor = m.clone().remove_row(0).remove_column(j);
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[(0, j)] * cofactor_det(&minor)
            })
            .sum()
    }

    #[test]
    fn log_det_matches_cofactor_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let w = random_params(&mut rng, 5, 0, 1).w;
            let det = cofactor_det(&(DMatrix::identity(5, 5) - &w));
            assert!((log_det_term(&w).unwrap() - det.abs().ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn penalty_is_added_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let panel = random_panel(&mut rng, 3, 6, 2);
        let params = random_params(&mut rng, 3, 2, 1);
        let zero = PenaltyConfig::new(0.0, 0.0, 0.0).unwrap();
        let nll = -log_likelihood(&params, &panel).unwrap();
        assert_eq!(penalized_objective(&params, &panel, &zero).unwrap(), nll);

        let pen = PenaltyConfig::new(0.1, 0.2, 0.3).unwrap();
        let mut by_hand = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                by_hand += 0.1 * params.w[(i, j)].abs();
            }
            by_hand += 0.2 * params.phi[(0, i)].abs();
        }
        for l in 0..2 {
            by_hand += 0.3 * params.beta[l].abs();
        }
        let obj = penalized_objective(&params, &panel, &pen).unwrap();
        assert!((obj - (nll + by_hand)).abs() < 1e-12 * obj.abs().max(1.0));

        let zeros = ModelParams::zeros(3, 2, 1, 1.0);
        let nll0 = -log_likelihood(&zeros, &panel).unwrap();
        assert_eq!(penalized_objective(&zeros, &panel, &pen).unwrap(), nll0);
    }

    #[test]
    fn diagonal_stationarity_case() {
        let mut params = ModelParams::zeros(4, 0, 1, 1.0);
        params.phi.fill(0.3);
        let rep = stationarity_check(&params);
        assert!(rep.stationary);
        assert_relative_eq!(rep.norm_value, 0.3, max_relative = 1e-12);
        assert!(rep.sufficient_bounds);
    }

    #[test]
    fn stationarity_norm_matches_eigen_oracle() {
        let n = 4;
        let mut params = ModelParams::zeros(n, 0, 1, 1.0);
        params.phi.fill(1.0);
        params.w = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.5 / 3.0 });
        let rep = stationarity_check(&params);
        let inv = (DMatrix::identity(n, n) - &params.w).try_inverse().unwrap();
        let m = inv * DMatrix::from_diagonal(&DVector::from_element(n, 1.0));
        let eig = (m.transpose() * &m).symmetric_eigen();
        let largest = eig.eigenvalues.iter().copied().fold(0.0, f64::max).sqrt();
        assert_relative_eq!(rep.norm_value, largest, max_relative = 1e-10);
        // (I - W)^{-1} has eigenvalue 1 / (1 - 0.5) = 2 on the constant vector
        assert_relative_eq!(rep.norm_value, 2.0, max_relative = 1e-10);
        assert!(!rep.stationary);
    }

    #[test]
    fn singular_weights_are_not_stationary() {
        let mut params = ModelParams::zeros(2, 0, 1, 1.0);
        params.w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let rep = stationarity_check(&params);
        assert!(!rep.stationary);
        assert!(rep.norm_value.is_infinite());
    }

    #[test]
    fn precision_closed_forms() {
        let params = ModelParams::zeros(3, 0, 1, 1.0);
        assert_eq!(precision_diagnostic(&params), DMatrix::identity(3, 3));
        let a = 0.4;
        let mut params = ModelParams::zeros(2, 0, 1, 2.0);
        params.w[(0, 1)] = a;
        let omega = precision_diagnostic(&params);
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -a, -a, 1.0 + a * a]) / 2.0;
        assert!((omega - expected).amax() < 1e-15);
    }

    #[test]
    fn layout_indices_are_consistent() {
        let layout = ParamLayout::new(4, 3, 2);
        assert_eq!(layout.len(), 3 + 8 + 12 + 1);
        let mut seen = vec![false; layout.len()];
        for l in 0..3 {
            seen[layout.beta(l)] = true;
        }
        for p in 0..2 {
            for i in 0..4 {
                seen[layout.phi(p, i)] = true;
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                if let Some(idx) = layout.w(i, j) {
                    assert_eq!(layout.w_entry(idx), (i, j));
                    seen[idx] = true;
                }
            }
        }
        seen[layout.sigma2()] = true;
        assert!(seen.iter().all(|&s| s));
        assert_eq!(ParamLayout::new(4, 3, 1).len(), 20);
        assert_eq!(ParamLayout::new(25, 3, 1).len(), 629);
        assert_eq!(layout.name(layout.w(1, 3).unwrap()), "w[2,4]");
        assert_eq!(layout.name(layout.phi(1, 0)), "phi2[1]");
    }
}
