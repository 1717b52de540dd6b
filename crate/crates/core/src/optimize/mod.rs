//! Constrained L1-penalized maximum likelihood.
//!
//! Because `w_ij >= 0` and `0 <= phi_p(i) <= 1`, their L1 penalties are
//! linear on the feasible set; `beta` is split into nonnegative parts
//! `beta+ - beta-` so its penalty is linear too. The resulting smooth
//! problem is solved by projected quasi-Newton over the polyhedron
//!
//! ```text
//! w_ij >= 0, w_ii = 0, sum_j w_ij <= 1 - delta_row,
//! phi_p(i) >= 0,       sum_p phi_p(i) <= 1 - delta_phi,
//! beta+, beta- >= 0
//! ```
//!
//! with `sigma2 = exp(s)` optimized jointly in log space. The spectral
//! stationarity condition `|| (I - W)^{-1} sum_p Phi_p ||_2 < 1` is checked
//! after each solve and, when violated, enforced by an augmented Lagrangian
//! outer loop. Exact zeros come from active bounds; `zero_threshold` only
//! removes solver slack.

mod pqn;
pub(crate) mod projection;
pub(crate) mod stats;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    gaussian_loglik, penalty_value, stationarity_check, ModelParams, PanelData, ParamGroup, ParamLayout,
    ParamVector, StationarityReport, DET_TOL,
};
use pqn::{PqnOptions, SmoothProblem};
use projection::project_capped_simplex;
pub(crate) use stats::CrossProducts;

/// Bounds on `log sigma2` inside the optimizer.
const LOG_SIGMA2_MIN: f64 = -27.631_021_115_928_547; // ln 1e-12
const LOG_SIGMA2_MAX: f64 = 27.631_021_115_928_547;
/// Margin below 1 demanded of the spectral stationarity norm.
const SPECTRAL_SLACK: f64 = 1e-6;
const MAX_OUTER: usize = 12;
/// Uniform initial weight mass per row.
const INIT_ROW_MASS: f64 = 0.1;
const INIT_PHI_MAX: f64 = 0.95;

/// L1 penalties on the weights, temporal coefficients and regression
/// coefficients respectively.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl PenaltyConfig {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let pen = Self { lambda1, lambda2, lambda3 };
        pen.validate()?;
        Ok(pen)
    }

    pub fn uniform(lambda: f64) -> Result<Self> {
        Self::new(lambda, lambda, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Least-squares based starting values, see [`initialize`].
    #[default]
    Data,
    /// Start from the given parameters (projected onto the feasible set).
    Given(ModelParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Temporal lag order `P`.
    pub lags: usize,
    pub max_iter: usize,
    /// Relative objective change that counts as convergence.
    pub tol_obj: f64,
    pub tol_feas: f64,
    /// Magnitudes below this are reported as exact zeros.
    pub zero_threshold: f64,
    pub init: InitStrategy,
    /// Seed for the perturbed restarts when `n_starts > 1`.
    pub seed: u64,
    pub n_starts: usize,
    /// Spectral projected gradient steps per quadratic subproblem.
    pub inner_iter: usize,
    pub delta_row: f64,
    pub delta_phi: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            lags: 1,
            max_iter: 2000,
            tol_obj: 1e-10,
            tol_feas: 1e-8,
            zero_threshold: 1e-4,
            init: InitStrategy::Data,
            seed: 0,
            n_starts: 1,
            inner_iter: 40,
            delta_row: 1e-6,
            delta_phi: 1e-6,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.lags < 1 {
            return Err(Error::Config("lag order must be at least 1".into()));
        }
        if self.max_iter < 1 || self.n_starts < 1 {
            return Err(Error::Config("max_iter and n_starts must be at least 1".into()));
        }
        if !(self.tol_obj > 0.0 && self.tol_feas > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if !(self.zero_threshold >= 0.0) {
            return Err(Error::Config("zero_threshold must be nonnegative".into()));
        }
        if !(self.delta_row > 0.0 && self.delta_row < 1.0 && self.delta_phi > 0.0 && self.delta_phi < 1.0) {
            return Err(Error::Config("delta_row and delta_phi must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Coordinates allowed to be nonzero. `sigma2` is always free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    pub layout: ParamLayout,
    free: Vec<bool>,
}

impl Support {
    pub fn all(layout: ParamLayout) -> Self {
        Self { layout, free: vec![true; layout.len()] }
    }

    /// Entries with `|value| > tau`.
    pub fn from_params(params: &ModelParams, tau: f64) -> Self {
        let packed = ParamVector::pack(params);
        let layout = packed.layout;
        let mut free: Vec<bool> = packed.values.iter().map(|v| v.abs() > tau).collect();
        free[layout.sigma2()] = true;
        Self { layout, free }
    }

    pub fn is_free(&self, idx: usize) -> bool {
        self.free[idx]
    }

    pub fn set(&mut self, idx: usize, free: bool) {
        if idx != self.layout.sigma2() {
            self.free[idx] = free;
        }
    }

    /// Freezes a whole parameter group at zero.
    pub fn freeze_group(&mut self, group: ParamGroup) {
        for idx in 0..self.layout.len() {
            if self.layout.group(idx) == group {
                self.set(idx, false);
            }
        }
    }

    /// Free flat indices, `sigma2` excluded.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.layout.sigma2()).filter(|&i| self.free[i]).collect()
    }

    pub fn beta(&self) -> Vec<usize> {
        (0..self.layout.k).filter(|&l| self.free[self.layout.beta(l)]).collect()
    }

    pub fn phi(&self) -> Vec<(usize, usize)> {
        let l = self.layout;
        (0..l.lags)
            .flat_map(|p| (0..l.n).map(move |i| (p, i)))
            .filter(|&(p, i)| self.free[l.phi(p, i)])
            .collect()
    }

    pub fn w(&self) -> Vec<(usize, usize)> {
        let l = self.layout;
        (0..l.n)
            .flat_map(|i| (0..l.n).map(move |j| (i, j)))
            .filter(|&(i, j)| l.w(i, j).is_some_and(|idx| self.free[idx]))
            .collect()
    }

    /// Number of free coordinates excluding `sigma2`.
    pub fn count(&self) -> usize {
        self.indices().len()
    }

    pub fn is_subset_of(&self, other: &Support) -> bool {
        self.layout == other.layout && self.free.iter().zip(&other.free).all(|(&a, &b)| !a || b)
    }
}

/// Index sets of the nonzero entries of a parameter set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ActiveSets {
    pub beta: Vec<usize>,
    /// `(lag, location)` pairs, 0-based lag.
    pub phi: Vec<(usize, usize)>,
    pub w: Vec<(usize, usize)>,
}

impl ActiveSets {
    pub fn of(params: &ModelParams) -> Self {
        let s = Support::from_params(params, 0.0);
        Self { beta: s.beta(), phi: s.phi(), w: s.w() }
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.phi.len() + self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    /// Penalized negative log-likelihood at `params`.
    pub objective: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub feasible: bool,
    pub active_sets: ActiveSets,
    /// Accepted merit values, one per quasi-Newton step.
    pub trace: Vec<f64>,
    pub penalty: PenaltyConfig,
    pub stationarity: StationarityReport,
}

/// Starting values: pooled least squares for `beta` (zero if the regressors
/// are rank deficient), per-location autoregressions of `y` for `phi`
/// clipped to `[0, 0.95]`, uniform weights `0.1 / (n - 1)`, and the residual
/// variance at those values for `sigma2`. `phi` is scaled down if needed so
/// the result passes the stationarity check.
pub fn initialize(panel: &PanelData, lags: usize) -> Result<ModelParams> {
    panel.check_lags(lags)?;
    let stats = CrossProducts::new(panel, &[0..panel.t()], lags)?;
    let support = Support::all(ParamLayout::new(panel.n(), panel.k(), lags));
    Ok(initialize_from(&stats, &support))
}

pub(crate) fn initialize_from(stats: &CrossProducts, support: &Support) -> ModelParams {
    let (n, k, lags) = (stats.n, stats.k, stats.lags);
    let layout = support.layout;
    let mut params = ModelParams::zeros(n, k, lags, 1.0);

    let free_beta = support.beta();
    if !free_beta.is_empty() {
        let (xtx, xty) = stats.pooled_regression_moments();
        let sub = DMatrix::from_fn(free_beta.len(), free_beta.len(), |a, b| xtx[(free_beta[a], free_beta[b])]);
        let rhs = DVector::from_fn(free_beta.len(), |a, _| xty[free_beta[a]]);
        if let Some(sol) = full_rank_solve(&sub, &rhs) {
            for (a, &l) in free_beta.iter().enumerate() {
                params.beta[l] = sol[a];
            }
        }
    }

    for i in 0..n {
        let free_lags: Vec<usize> = (0..lags).filter(|&p| support.is_free(layout.phi(p, i))).collect();
        if free_lags.is_empty() {
            continue;
        }
        let gram = DMatrix::from_fn(free_lags.len(), free_lags.len(), |a, b| {
            stats.own_lag_moment(i, free_lags[a] + 1, free_lags[b] + 1)
        });
        let rhs = DVector::from_fn(free_lags.len(), |a, _| stats.own_lag_moment(i, 0, free_lags[a] + 1));
        if let Some(sol) = full_rank_solve(&gram, &rhs) {
            let mut total = 0.0;
            for (a, &p) in free_lags.iter().enumerate() {
                let v = sol[a].clamp(0.0, INIT_PHI_MAX);
                params.phi[(p, i)] = v;
                total += v;
            }
            if total > INIT_PHI_MAX {
                for &p in &free_lags {
                    params.phi[(p, i)] *= INIT_PHI_MAX / total;
                }
            }
        }
    }

    let share = INIT_ROW_MASS / (n - 1) as f64;
    for i in 0..n {
        for j in 0..n {
            if let Some(idx) = layout.w(i, j) {
                if support.is_free(idx) {
                    params.w[(i, j)] = share;
                }
            }
        }
    }

    let norm = stationarity_check(&params).norm_value;
    if norm >= 0.99 {
        params.phi *= 0.99 / norm;
    }

    let ssr = stats.ssr(&params.w, &params.phi, &params.beta);
    let sigma2 = ssr / stats.n_obs() as f64;
    params.sigma2 = if sigma2.is_finite() && sigma2 > 0.0 { sigma2.max(LOG_SIGMA2_MIN.exp()) } else { 1.0 };
    params
}

/// Solves `a x = b` when `a` is numerically full rank.
fn full_rank_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    if !(smax > 0.0) || svd.singular_values.iter().any(|&s| s <= 1e-10 * smax) {
        return None;
    }
    svd.solve(b, 0.0).ok()
}

/// Negative log-likelihood and its gradient in natural parameters.
pub(crate) struct NllEval {
    pub nll: f64,
    pub grad_w: DMatrix<f64>,
    pub grad_phi: DMatrix<f64>,
    pub grad_beta: DVector<f64>,
    pub grad_sigma2: f64,
    /// `(I - W)^{-1}`
    pub inverse: DMatrix<f64>,
}

pub(crate) fn nll_eval(
    stats: &CrossProducts,
    w: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    beta: &DVector<f64>,
    sigma2: f64,
) -> Option<NllEval> {
    let n = stats.n;
    let lu = (DMatrix::identity(n, n) - w).lu();
    let u = lu.u();
    let mut logdet = 0.0;
    for i in 0..n {
        let d = u[(i, i)].abs();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        logdet += d.ln();
    }
    if logdet < DET_TOL.ln() {
        return None;
    }
    let inverse = lu.try_inverse()?;
    let r = stats.m_times_s(w, phi, beta);
    let ssr = stats.ssr_from(&r, w, phi, beta);
    let t_eff = stats.t_eff as f64;
    let n_obs = stats.n_obs() as f64;
    let nll = -gaussian_loglik(logdet, ssr, n_obs, t_eff, sigma2);

    let inv_s2 = 1.0 / sigma2;
    let mut grad_w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                grad_w[(i, j)] = t_eff * inverse[(j, i)] - inv_s2 * r[(i, j)];
            }
        }
    }
    let grad_phi = DMatrix::from_fn(stats.lags, n, |p, i| -inv_s2 * r[(i, stats.block(p + 1) + i)]);
    let grad_beta = DVector::from_fn(stats.k, |l, _| {
        -inv_s2 * (0..n).map(|i| r[(i, stats.regressor_block(l) + i)]).sum::<f64>()
    });
    let grad_sigma2 = 0.5 * n_obs * inv_s2 - 0.5 * ssr * inv_s2 * inv_s2;
    Some(NllEval { nll, grad_w, grad_phi, grad_beta, grad_sigma2, inverse })
}

/// Gradient of the smooth penalized objective in the flat layout of
/// [`ParamVector`]: `-ln L` plus `lambda1` per weight and `lambda2` per
/// temporal coefficient (their penalties are linear on the feasible set)
/// and `lambda3 * sign(beta)` per regression coefficient. The `sigma2`
/// component is taken with respect to `sigma2` itself.
pub fn objective_gradient(params: &ModelParams, panel: &PanelData, pen: &PenaltyConfig) -> Result<ParamVector> {
    pen.validate()?;
    if !(params.sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma2 = {} must be positive", params.sigma2)));
    }
    if panel.n() != params.n() || panel.k() != params.k() {
        return Err(Error::Dimension("params and panel disagree on n or k".into()));
    }
    panel.check_lags(params.lags())?;
    let stats = CrossProducts::new(panel, &[0..panel.t()], params.lags())?;
    let ev = nll_eval(&stats, &params.w, &params.phi, &params.beta, params.sigma2).ok_or_else(|| {
        Error::Singular { det: crate::model::log_det_term(&params.w).map(f64::exp).unwrap_or(0.0) }
    })?;
    let layout = params.layout();
    let mut g = vec![0.0; layout.len()];
    for l in 0..layout.k {
        g[layout.beta(l)] = ev.grad_beta[l] + pen.lambda3 * sign(params.beta[l]);
    }
    for p in 0..layout.lags {
        for i in 0..layout.n {
            g[layout.phi(p, i)] = ev.grad_phi[(p, i)] + pen.lambda2;
        }
    }
    for i in 0..layout.n {
        for j in 0..layout.n {
            if let Some(idx) = layout.w(i, j) {
                g[idx] = ev.grad_w[(i, j)] + pen.lambda1;
            }
        }
    }
    g[layout.sigma2()] = ev.grad_sigma2;
    ParamVector::from_values(layout, g)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Optimizer variables: `[beta+ (k), beta- (k), phi (P n, lag-major),
/// off-diagonal w (n (n - 1), row-major), log sigma2]`.
#[derive(Debug, Clone, Copy)]
struct VarLayout {
    params: ParamLayout,
}

impl VarLayout {
    fn dim(&self) -> usize {
        self.params.len() + self.params.k
    }
    fn beta_plus(&self, l: usize) -> usize {
        l
    }
    fn beta_minus(&self, l: usize) -> usize {
        self.params.k + l
    }
    fn phi(&self, p: usize, i: usize) -> usize {
        self.params.k + self.params.phi(p, i)
    }
    fn w(&self, i: usize, j: usize) -> Option<usize> {
        self.params.w(i, j).map(|idx| idx + self.params.k)
    }
    fn log_sigma2(&self) -> usize {
        self.dim() - 1
    }

    fn encode(&self, params: &ModelParams) -> DVector<f64> {
        let l = self.params;
        let mut x = DVector::zeros(self.dim());
        for b in 0..l.k {
            x[self.beta_plus(b)] = params.beta[b].max(0.0);
            x[self.beta_minus(b)] = (-params.beta[b]).max(0.0);
        }
        for p in 0..l.lags {
            for i in 0..l.n {
                x[self.phi(p, i)] = params.phi[(p, i)];
            }
        }
        for i in 0..l.n {
            for j in 0..l.n {
                if let Some(idx) = self.w(i, j) {
                    x[idx] = params.w[(i, j)];
                }
            }
        }
        x[self.log_sigma2()] = params.sigma2.max(LOG_SIGMA2_MIN.exp()).ln();
        x
    }

    fn decode(&self, x: &DVector<f64>) -> ModelParams {
        let l = self.params;
        let beta = DVector::from_fn(l.k, |b, _| x[self.beta_plus(b)] - x[self.beta_minus(b)]);
        let phi = DMatrix::from_fn(l.lags, l.n, |p, i| x[self.phi(p, i)]);
        let w = DMatrix::from_fn(l.n, l.n, |i, j| self.w(i, j).map_or(0.0, |idx| x[idx]));
        ModelParams { beta, phi, w, sigma2: x[self.log_sigma2()].exp() }
    }
}

#[derive(Debug, Clone, Copy)]
struct AugmentedTerm {
    multiplier: f64,
    penalty: f64,
}

struct PenalizedProblem<'a> {
    stats: &'a CrossProducts,
    pen: PenaltyConfig,
    vars: VarLayout,
    frozen: Vec<bool>,
    row_cap: f64,
    phi_cap: f64,
    spectral: Option<AugmentedTerm>,
}

impl<'a> PenalizedProblem<'a> {
    fn new(stats: &'a CrossProducts, pen: PenaltyConfig, support: &Support, opts: &SolverOptions) -> Self {
        let vars = VarLayout { params: support.layout };
        let l = support.layout;
        let mut frozen = vec![false; vars.dim()];
        for b in 0..l.k {
            let f = !support.is_free(l.beta(b));
            frozen[vars.beta_plus(b)] = f;
            frozen[vars.beta_minus(b)] = f;
        }
        for idx in l.k..l.sigma2() {
            frozen[idx + l.k] = !support.is_free(idx);
        }
        Self {
            stats,
            pen,
            vars,
            frozen,
            row_cap: 1.0 - opts.delta_row,
            phi_cap: 1.0 - opts.delta_phi,
            spectral: None,
        }
    }
}

impl SmoothProblem for PenalizedProblem<'_> {
    fn dim(&self) -> usize {
        self.vars.dim()
    }

    fn eval(&self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        let params = self.vars.decode(x);
        let Some(ev) = nll_eval(self.stats, &params.w, &params.phi, &params.beta, params.sigma2) else {
            return f64::INFINITY;
        };
        let l = self.vars.params;
        let pen = self.pen;
        let mut f = ev.nll;
        for b in 0..l.k {
            let (bp, bm) = (self.vars.beta_plus(b), self.vars.beta_minus(b));
            f += pen.lambda3 * (x[bp] + x[bm]);
            grad[bp] = ev.grad_beta[b] + pen.lambda3;
            grad[bm] = -ev.grad_beta[b] + pen.lambda3;
        }
        for p in 0..l.lags {
            for i in 0..l.n {
                let idx = self.vars.phi(p, i);
                f += pen.lambda2 * x[idx];
                grad[idx] = ev.grad_phi[(p, i)] + pen.lambda2;
            }
        }
        for i in 0..l.n {
            for j in 0..l.n {
                if let Some(idx) = self.vars.w(i, j) {
                    f += pen.lambda1 * x[idx];
                    grad[idx] = ev.grad_w[(i, j)] + pen.lambda1;
                }
            }
        }
        grad[self.vars.log_sigma2()] = ev.grad_sigma2 * params.sigma2;

        if let Some(term) = self.spectral {
            f += spectral_augmentation(&params, &ev.inverse, term, &self.vars, grad);
        }
        for (idx, &frozen) in self.frozen.iter().enumerate() {
            if frozen {
                grad[idx] = 0.0;
            }
        }
        f
    }

    fn project(&self, x: &mut DVector<f64>) {
        let l = self.vars.params;
        for b in 0..l.k {
            for idx in [self.vars.beta_plus(b), self.vars.beta_minus(b)] {
                x[idx] = if self.frozen[idx] { 0.0 } else { x[idx].max(0.0) };
            }
        }
        let mut buf = Vec::with_capacity(l.n.max(l.lags));
        let mut slots = Vec::with_capacity(l.n.max(l.lags));
        for i in 0..l.n {
            buf.clear();
            slots.clear();
            for p in 0..l.lags {
                let idx = self.vars.phi(p, i);
                if self.frozen[idx] {
                    x[idx] = 0.0;
                } else {
                    slots.push(idx);
                    buf.push(x[idx]);
                }
            }
            project_capped_simplex(&mut buf, self.phi_cap);
            for (&idx, &v) in slots.iter().zip(&buf) {
                x[idx] = v;
            }
        }
        for i in 0..l.n {
            buf.clear();
            slots.clear();
            for j in 0..l.n {
                if let Some(idx) = self.vars.w(i, j) {
                    if self.frozen[idx] {
                        x[idx] = 0.0;
                    } else {
                        slots.push(idx);
                        buf.push(x[idx]);
                    }
                }
            }
            project_capped_simplex(&mut buf, self.row_cap);
            for (&idx, &v) in slots.iter().zip(&buf) {
                x[idx] = v;
            }
        }
        let s = self.vars.log_sigma2();
        x[s] = x[s].clamp(LOG_SIGMA2_MIN, LOG_SIGMA2_MAX);
    }
}

/// Adds the augmented Lagrangian term for
/// `g = ||(I - W)^{-1} D||_2 - (1 - slack) <= 0`, `D = diag(sum_p phi_p)`,
/// to `grad` and returns its value. With top singular triple `(s, u, v)`
/// and `a = (I - W)^{-T} u`: `dg/dw_ij = s a_i u_j`, `dg/dphi_p(i) = a_i v_i`.
fn spectral_augmentation(
    params: &ModelParams,
    inverse: &DMatrix<f64>,
    term: AugmentedTerm,
    vars: &VarLayout,
    grad: &mut DVector<f64>,
) -> f64 {
    let n = params.n();
    let sums = crate::model::lag_sums(params);
    let b = DMatrix::from_fn(n, n, |i, j| inverse[(i, j)] * sums[j]);
    let svd = b.svd(true, true);
    let (top, &sigma) = svd
        .singular_values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("n >= 2");
    let g = sigma - (1.0 - SPECTRAL_SLACK);
    let active = (term.multiplier + term.penalty * g).max(0.0);
    let value = (active * active - term.multiplier * term.multiplier) / (2.0 * term.penalty);
    if active > 0.0 {
        let u = svd.u.as_ref().expect("requested").column(top).into_owned();
        let v = svd.v_t.as_ref().expect("requested").row(top).transpose();
        let a = inverse.transpose() * &u;
        for i in 0..n {
            for j in 0..n {
                if let Some(idx) = vars.w(i, j) {
                    grad[idx] += active * sigma * a[i] * u[j];
                }
            }
            for p in 0..params.lags() {
                grad[vars.phi(p, i)] += active * a[i] * v[i];
            }
        }
    }
    value
}

/// Minimizes the penalized negative log-likelihood over all coordinates.
pub fn fit(panel: &PanelData, pen: &PenaltyConfig, opts: &SolverOptions) -> Result<FitResult> {
    fit_with_support(panel, pen, opts, None)
}

/// As [`fit`], with coordinates outside `support` held at exactly zero.
pub fn fit_with_support(
    panel: &PanelData,
    pen: &PenaltyConfig,
    opts: &SolverOptions,
    support: Option<&Support>,
) -> Result<FitResult> {
    fit_segments(panel, &[0..panel.t()], pen, opts, support)
}

/// Fits on a union of contiguous time segments, each conditioning on its
/// own first `P` observations.
pub(crate) fn fit_segments(
    panel: &PanelData,
    segments: &[Range<usize>],
    pen: &PenaltyConfig,
    opts: &SolverOptions,
    support: Option<&Support>,
) -> Result<FitResult> {
    pen.validate()?;
    opts.validate()?;
    panel.check_lags(opts.lags)?;
    let layout = ParamLayout::new(panel.n(), panel.k(), opts.lags);
    let support = match support {
        Some(s) if s.layout != layout => {
            return Err(Error::Dimension(format!(
                "support layout {:?} does not match the panel {:?}",
                s.layout, layout
            )))
        }
        Some(s) => s.clone(),
        None => Support::all(layout),
    };
    let stats = CrossProducts::new(panel, segments, opts.lags)?;
    fit_stats(&stats, pen, opts, &support)
}

pub(crate) fn fit_stats(
    stats: &CrossProducts,
    pen: &PenaltyConfig,
    opts: &SolverOptions,
    support: &Support,
) -> Result<FitResult> {
    let start = match &opts.init {
        InitStrategy::Data => initialize_from(stats, support),
        InitStrategy::Given(p) => {
            if p.layout() != support.layout {
                return Err(Error::Initialization(format!(
                    "given start has layout {:?}, expected {:?}",
                    p.layout(),
                    support.layout
                )));
            }
            p.clone()
        }
    };
    let mut best: Option<Solved> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for attempt in 0..opts.n_starts {
        let x0 = if attempt == 0 { start.clone() } else { perturb(&start, &mut rng) };
        let solved = solve_from(stats, pen, opts, support, &x0)?;
        if best.as_ref().is_none_or(|b| solved.merit < b.merit) {
            best = Some(solved);
        }
    }
    let solved = best.expect("n_starts >= 1");
    finish(stats, pen, opts, solved)
}

fn perturb(start: &ModelParams, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = start.clone();
    for v in p.w.iter_mut() {
        *v *= rng.random_range(0.0..3.0);
    }
    for v in p.phi.iter_mut() {
        *v = (*v + rng.random_range(-0.2..0.2)).max(0.0);
    }
    for v in p.beta.iter_mut() {
        *v *= rng.random_range(0.5..1.5);
    }
    p
}

struct Solved {
    params: ModelParams,
    merit: f64,
    iterations: usize,
    outer: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn solve_from(
    stats: &CrossProducts,
    pen: &PenaltyConfig,
    opts: &SolverOptions,
    support: &Support,
    start: &ModelParams,
) -> Result<Solved> {
    let mut problem = PenalizedProblem::new(stats, *pen, support, opts);
    let pqn_opts = PqnOptions { max_iter: opts.max_iter, tol_obj: opts.tol_obj, inner_iter: opts.inner_iter };
    let mut x = problem.vars.encode(start);
    problem.project(&mut x);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut outer = 0;
    let mut converged;
    let mut merit;
    let mut term = AugmentedTerm { multiplier: 0.0, penalty: 10.0 };
    loop {
        let out = pqn::minimize(&problem, x, pqn_opts, &mut trace)
            .map_err(|message| Error::Numerical { message, trace: trace.clone() })?;
        iterations += out.iterations;
        converged = out.converged;
        merit = out.f;
        x = out.x;
        let params = problem.vars.decode(&x);
        let violation = stationarity_check(&params).norm_value - (1.0 - SPECTRAL_SLACK);
        let settled = violation <= opts.tol_feas
            && (problem.spectral.is_none() || (term.multiplier * violation).abs() <= opts.tol_feas);
        if settled || outer >= MAX_OUTER {
            break;
        }
        outer += 1;
        if problem.spectral.is_some() {
            term.multiplier = (term.multiplier + term.penalty * violation).max(0.0);
            if violation > opts.tol_feas {
                term.penalty *= 10.0;
            }
        }
        problem.spectral = Some(term);
    }
    Ok(Solved { params: problem.vars.decode(&x), merit, iterations, outer, converged, trace })
}

fn finish(stats: &CrossProducts, pen: &PenaltyConfig, opts: &SolverOptions, solved: Solved) -> Result<FitResult> {
    let mut params = solved.params;
    let tau = opts.zero_threshold;
    for v in params.beta.iter_mut().chain(params.phi.iter_mut()).chain(params.w.iter_mut()) {
        if v.abs() < tau {
            *v = 0.0;
        }
    }
    let ev = nll_eval(stats, &params.w, &params.phi, &params.beta, params.sigma2).ok_or_else(|| {
        Error::Numerical { message: "final estimate has singular I - W".into(), trace: solved.trace.clone() }
    })?;
    let loglik = -ev.nll;
    let objective = ev.nll + penalty_value(&params, pen);
    if !objective.is_finite() {
        return Err(Error::Numerical { message: "objective is not finite".into(), trace: solved.trace });
    }
    let stationarity = stationarity_check(&params);
    let feasible = params.invariant_violations(opts.delta_row, opts.tol_feas).is_empty() && stationarity.stationary;
    Ok(FitResult {
        active_sets: ActiveSets::of(&params),
        params,
        objective,
        loglik,
        iterations: solved.iterations,
        outer_iterations: solved.outer,
        converged: solved.converged,
        feasible,
        trace: solved.trace,
        penalty: *pen,
        stationarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{log_likelihood, penalized_objective};
    use crate::simulate::{make_true_params, simulate_panel, DgpConfig};

    fn dgp_panel(side: usize, t: usize, seed: u64) -> (ModelParams, PanelData) {
        let cfg = DgpConfig { side, t, seed, ..DgpConfig::default() };
        let truth = make_true_params(&cfg).unwrap();
        let panel = simulate_panel(&truth, &cfg).unwrap();
        (truth, panel)
    }

    #[test]
    fn penalty_validation() {
        assert!(PenaltyConfig::new(-1.0, 0.0, 0.0).is_err());
        assert!(PenaltyConfig::new(0.0, f64::NAN, 0.0).is_err());
        assert!(PenaltyConfig::new(0.0, 1.0, 2.0).is_ok());
    }

    #[test]
    fn encode_decode_round_trip() {
        let (truth, _) = dgp_panel(2, 10, 0);
        let vars = VarLayout { params: truth.layout() };
        let mut p = truth.clone();
        p.beta[1] = -0.5;
        let back = vars.decode(&vars.encode(&p));
        assert_eq!(back.w, p.w);
        assert_eq!(back.beta, p.beta);
        assert!((back.sigma2 - p.sigma2).abs() < 1e-15);
    }

    #[test]
    fn initialization_is_feasible_and_stationary() {
        let (_, panel) = dgp_panel(3, 80, 4);
        let init = initialize(&panel, 1).unwrap();
        assert!(init.invariant_violations(1e-6, 0.0).is_empty());
        assert!(stationarity_check(&init).stationary);
        for i in 0..9 {
            for j in 0..9 {
                if i != j {
                    assert!((init.w[(i, j)] - 0.1 / 8.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn initialization_on_white_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = 2000;
        let y = DMatrix::from_fn(4, t, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
        let x = (0..t)
            .map(|_| DMatrix::from_fn(4, 2, |_, _| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng)))
            .collect();
        let panel = PanelData::new(y, x).unwrap();
        let init = initialize(&panel, 1).unwrap();
        assert!(init.beta.amax() < 0.05, "{}", init.beta);
        assert!(init.phi.amax() < 0.06, "{}", init.phi);
        assert!(stationarity_check(&init).stationary);
    }

    #[test]
    fn initialization_recovers_strong_autoregression() {
        let cfg = DgpConfig {
            rho: 0.0,
            t: 400,
            phi_scheme: crate::simulate::PhiScheme { zero_fraction: 0.0, value: 0.9 },
            ..DgpConfig::default()
        };
        let truth = make_true_params(&cfg).unwrap();
        let panel = simulate_panel(&truth, &cfg).unwrap();
        let init = initialize(&panel, 1).unwrap();
        for i in 0..4 {
            assert!((init.phi[(0, i)] - 0.9).abs() < 0.1, "{}", init.phi);
        }
    }

    #[test]
    fn rank_deficient_regressors_fall_back_to_zero() {
        let (_, panel) = dgp_panel(2, 30, 2);
        let x: Vec<_> = panel
            .x()
            .iter()
            .map(|m| {
                let mut m = m.clone();
                let c = m.column(0).into_owned();
                m.set_column(1, &c);
                m
            })
            .collect();
        let panel = PanelData::new(panel.y().clone(), x).unwrap();
        let init = initialize(&panel, 1).unwrap();
        assert!(init.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn gradient_vanishes_in_sigma2_at_profile_mle() {
        let (truth, panel) = dgp_panel(2, 40, 3);
        let mut p = truth.clone();
        let eps = crate::model::residuals(&p, &panel).unwrap();
        p.sigma2 = eps.norm_squared() / eps.len() as f64;
        let g = objective_gradient(&p, &panel, &PenaltyConfig::default()).unwrap();
        let idx = g.layout.sigma2();
        assert!(g.values[idx].abs() < 1e-9, "{}", g.values[idx]);
    }

    #[test]
    fn fit_recovers_dgp_at_moderate_sample() {
        let (truth, panel) = dgp_panel(2, 400, 5);
        let res = fit(&panel, &PenaltyConfig::uniform(0.1).unwrap(), &SolverOptions::default()).unwrap();
        assert!(res.converged && res.feasible, "{} {} {} {:?}", res.converged, res.feasible, res.iterations, res.stationarity);
        assert!((&res.params.beta - &truth.beta).amax() < 0.15, "{}", res.params.beta);
        assert!((&res.params.w - &truth.w).amax() < 0.15, "{}", res.params.w);
        assert!((res.params.sigma2 - 1.0).abs() < 0.2);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0] + 1e-10));
        let direct = penalized_objective(&res.params, &panel, &res.penalty).unwrap();
        assert!((direct - res.objective).abs() < 1e-8 * direct.abs());
        let ll = log_likelihood(&res.params, &panel).unwrap();
        assert!((ll - res.loglik).abs() < 1e-8 * ll.abs());
    }

    #[test]
    fn frozen_spatial_and_temporal_terms_give_ols() {
        let (_, panel) = dgp_panel(2, 60, 6);
        let layout = ParamLayout::new(4, 3, 1);
        let mut support = Support::all(layout);
        support.freeze_group(ParamGroup::Weight);
        support.freeze_group(ParamGroup::Phi);
        let opts = SolverOptions { zero_threshold: 0.0, ..SolverOptions::default() };
        let res = fit_with_support(&panel, &PenaltyConfig::default(), &opts, Some(&support)).unwrap();
        let stats = CrossProducts::new(&panel, &[0..panel.t()], 1).unwrap();
        let (xtx, xty) = stats.pooled_regression_moments();
        let ols = xtx.lu().solve(&xty).unwrap();
        assert!((&res.params.beta - &ols).amax() < 1e-6, "{} vs {}", res.params.beta, ols);
        assert!(res.params.w.iter().all(|&v| v == 0.0));
        assert!(res.params.phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn huge_penalties_shrink_everything() {
        let (_, panel) = dgp_panel(2, 50, 7);
        let res = fit(&panel, &PenaltyConfig::uniform(1e6).unwrap(), &SolverOptions::default()).unwrap();
        assert!(res.active_sets.is_empty(), "{:?}", res.active_sets);
        let second_moment = panel.y().columns(1, 49).norm_squared() / (4.0 * 49.0);
        assert!((res.params.sigma2 - second_moment).abs() < 1e-6 * second_moment);
    }

    #[test]
    fn refit_from_solution_is_idempotent() {
        let (_, panel) = dgp_panel(2, 100, 8);
        let pen = PenaltyConfig::uniform(1.0).unwrap();
        let first = fit(&panel, &pen, &SolverOptions::default()).unwrap();
        let opts = SolverOptions { init: InitStrategy::Given(first.params.clone()), ..SolverOptions::default() };
        let second = fit(&panel, &pen, &opts).unwrap();
        assert!((second.objective - first.objective).abs() <= 1e-8 * first.objective.abs());
    }

    #[test]
    fn active_sets_agree_with_params() {
        let (_, panel) = dgp_panel(3, 60, 9);
        let res = fit(&panel, &PenaltyConfig::new(20.0, 1.0, 1.0).unwrap(), &SolverOptions::default()).unwrap();
        let l = res.params.layout();
        for i in 0..9 {
            for j in 0..9 {
                if i != j {
                    assert_eq!(res.active_sets.w.contains(&(i, j)), res.params.w[(i, j)] != 0.0);
                }
            }
            assert_eq!(res.active_sets.phi.contains(&(0, i)), res.params.phi[(0, i)] != 0.0);
        }
        assert_eq!(l.len(), 85);
    }

    #[test]
    fn spectral_constraint_is_enforced_when_bounds_are_not_enough() {
        // Strongly persistent locations with strong spatial coupling: the
        // row-sum and lag-sum bounds alone admit non-stationary estimates.
        let n = 3;
        let mut truth = ModelParams::zeros(n, 0, 1, 1.0);
        truth.phi.fill(0.6);
        truth.w = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 0.18 });
        assert!(stationarity_check(&truth).stationary);
        let t = 300;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = DMatrix::from_fn(n, t, |_, _| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng));
        // add a unit-root-like drift so the unconstrained optimum is explosive
        let mut panel = crate::simulate::simulate_with_innovations(&truth, vec![DMatrix::zeros(n, 0); t], &eps).unwrap();
        let drift = DMatrix::from_fn(n, t, |_, tt| tt as f64 * 0.5);
        panel = PanelData::without_regressors(panel.y() + drift).unwrap();
        let res = fit(&panel, &PenaltyConfig::default(), &SolverOptions::default()).unwrap();
        assert!(res.outer_iterations > 0);
        assert!(res.stationarity.norm_value < 1.0, "{:?}", res.stationarity);
        assert!(res.feasible);
    }
}
