//! Synthetic panels on a square lattice with queen-contiguity weights.
//!
//! Random draws come from three independent ChaCha8 streams sharing the
//! configured seed: stream 0 holds the recorded regressors, stream 1 the
//! innovations (burn-in steps first), stream 2 the burn-in regressors.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{stationarity_check, ModelParams, PanelData};

const REGRESSOR_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const BURN_IN_STREAM: u64 = 2;

/// How temporal coefficients are assigned: the first
/// `floor(zero_fraction * n)` locations get 0, the rest `value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiScheme {
    pub zero_fraction: f64,
    pub value: f64,
}

impl Default for PhiScheme {
    fn default() -> Self {
        Self { zero_fraction: 0.25, value: 0.3 }
    }
}

/// Data-generating process configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    /// Lattice side length; `n = side^2`.
    pub side: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub k: usize,
    pub rho: f64,
    pub beta_true: Vec<f64>,
    pub phi_scheme: PhiScheme,
    pub sigma2_true: f64,
    pub seed: u64,
    pub burn_in: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            side: 2,
            t: 200,
            k: 3,
            rho: 0.6,
            beta_true: vec![3.0, 0.0, 2.0],
            phi_scheme: PhiScheme::default(),
            sigma2_true: 1.0,
            seed: 0,
            burn_in: 200,
        }
    }
}

impl DgpConfig {
    pub fn n(&self) -> usize {
        self.side * self.side
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(Error::Domain(format!("lattice side must be >= 2, got {}", self.side)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho = {} must lie in [0, 1)", self.rho)));
        }
        if self.beta_true.len() != self.k {
            return Err(Error::Config(format!(
                "beta_true has {} entries for k = {}",
                self.beta_true.len(),
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.phi_scheme.zero_fraction) {
            return Err(Error::Config("phi zero_fraction must lie in [0, 1]".into()));
        }
        if !(self.sigma2_true >= 0.0) {
            return Err(Error::Config("sigma2_true must be nonnegative".into()));
        }
        Ok(())
    }

    /// Per-replication config: seed `seed + replication`.
    pub fn replication(&self, replication: u64) -> Self {
        Self { seed: self.seed.wrapping_add(replication), ..self.clone() }
    }
}

/// Row-standardized queen-contiguity matrix of a `side x side` lattice.
/// Cells are numbered row-major.
pub fn queen_lattice_weights(side: usize) -> Result<DMatrix<f64>> {
    if side < 2 {
        return Err(Error::Domain(format!("lattice side must be >= 2, got {side}")));
    }
    let n = side * side;
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let (r, c) = ((i / side) as isize, (i % side) as isize);
        let mut nb = Vec::with_capacity(8);
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (rr, cc) = (r + dr, c + dc);
                if (dr, dc) != (0, 0) && (0..side as isize).contains(&rr) && (0..side as isize).contains(&cc) {
                    nb.push(rr as usize * side + cc as usize);
                }
            }
        }
        let share = 1.0 / nb.len() as f64;
        for j in nb {
            w[(i, j)] = share;
        }
    }
    Ok(w)
}

pub fn make_true_params(cfg: &DgpConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let n = cfg.n();
    let w = queen_lattice_weights(cfg.side)? * cfg.rho;
    let zeros = (cfg.phi_scheme.zero_fraction * n as f64).floor() as usize;
    let phi = DMatrix::from_fn(1, n, |_, i| if i < zeros { 0.0 } else { cfg.phi_scheme.value });
    let params = ModelParams {
        beta: DVector::from_vec(cfg.beta_true.clone()),
        phi,
        w,
        sigma2: cfg.sigma2_true,
    };
    let report = stationarity_check(&params);
    if !report.stationary {
        return Err(Error::Config(format!(
            "true parameters are not stationary (norm {:.4})",
            report.norm_value
        )));
    }
    Ok(params)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // row-major draw order
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// iid standard normal regressors, one `n x k` matrix per recorded time point.
pub fn simulate_regressors(cfg: &DgpConfig) -> Vec<DMatrix<f64>> {
    let mut rng = stream(cfg.seed, REGRESSOR_STREAM);
    (0..cfg.t).map(|_| normal_matrix(&mut rng, cfg.n(), cfg.k)).collect()
}

/// Iterates the reduced form from zero initial conditions, discards
/// `cfg.burn_in` steps, then records `cfg.t` time points.
pub fn simulate_panel(params: &ModelParams, cfg: &DgpConfig) -> Result<PanelData> {
    cfg.validate()?;
    let n = cfg.n();
    if params.n() != n || params.k() != cfg.k {
        return Err(Error::Dimension(format!(
            "params are for n = {}, k = {}; config has n = {n}, k = {}",
            params.n(),
            params.k(),
            cfg.k
        )));
    }
    let report = stationarity_check(params);
    if !report.stationary {
        return Err(Error::NonStationary { norm: report.norm_value });
    }
    if !(params.sigma2 >= 0.0) {
        return Err(Error::Domain("sigma2 must be nonnegative".into()));
    }
    let sd = params.sigma2.sqrt();
    let mut noise = stream(cfg.seed, NOISE_STREAM);
    let mut burn = stream(cfg.seed, BURN_IN_STREAM);
    let mut recursion = Recursion::new(params)?;
    for _ in 0..cfg.burn_in {
        let x = normal_matrix(&mut burn, n, cfg.k);
        let e = normal_matrix(&mut noise, n, 1).column(0) * sd;
        recursion.step(&x, &e.into_owned())?;
    }
    let x = simulate_regressors(cfg);
    let mut y = DMatrix::zeros(n, cfg.t);
    for (t, xt) in x.iter().enumerate() {
        let e = normal_matrix(&mut noise, n, 1).column(0) * sd;
        y.set_column(t, &recursion.step(xt, &e.into_owned())?);
    }
    PanelData::new(y, x)
}

/// Runs the recursion with caller-supplied regressors and innovations
/// (`eps` is n x T) from zero initial conditions, without burn-in.
pub fn simulate_with_innovations(
    params: &ModelParams,
    x: Vec<DMatrix<f64>>,
    eps: &DMatrix<f64>,
) -> Result<PanelData> {
    let n = params.n();
    if eps.nrows() != n || eps.ncols() != x.len() {
        return Err(Error::Dimension(format!(
            "innovations have shape {:?}, expected ({n}, {})",
            eps.shape(),
            x.len()
        )));
    }
    let mut recursion = Recursion::new(params)?;
    let mut y = DMatrix::zeros(n, x.len());
    for (t, xt) in x.iter().enumerate() {
        if xt.shape() != (n, params.k()) {
            return Err(Error::Dimension(format!("X_{t} has shape {:?}", xt.shape())));
        }
        y.set_column(t, &recursion.step(xt, &eps.column(t).into_owned())?);
    }
    PanelData::new(y, x)
}

/// Reduced-form recursion with `I - W` factorized once.
struct Recursion<'a> {
    params: &'a ModelParams,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    history: VecDeque<DVector<f64>>,
}

impl<'a> Recursion<'a> {
    fn new(params: &'a ModelParams) -> Result<Self> {
        let n = params.n();
        crate::model::log_det_term(&params.w)?;
        let lu = (DMatrix::identity(n, n) - &params.w).lu();
        let history = (0..params.lags()).map(|_| DVector::zeros(n)).collect();
        Ok(Self { params, lu, history })
    }

    fn step(&mut self, x: &DMatrix<f64>, eps: &DVector<f64>) -> Result<DVector<f64>> {
        let mut rhs = x * &self.params.beta + eps;
        for (p, lagged) in self.history.iter().enumerate() {
            for i in 0..rhs.len() {
                rhs[i] += self.params.phi[(p, i)] * lagged[i];
            }
        }
        let y = self.lu.solve(&rhs).ok_or(Error::Singular { det: 0.0 })?;
        if self.params.lags() > 0 {
            self.history.pop_back();
            self.history.push_front(y.clone());
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::residuals;

    #[test]
    fn queen_side_two_is_complete_graph() {
        let w = queen_lattice_weights(2).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert_eq!(w[(i, j)], expected);
            }
        }
    }

    #[test]
    fn queen_side_three_degrees() {
        let w = queen_lattice_weights(3).unwrap();
        let count = |i: usize| w.row(i).iter().filter(|&&v| v > 0.0).count();
        assert_eq!(count(4), 8);
        assert!(w.row(4).iter().enumerate().all(|(j, &v)| v == if j == 4 { 0.0 } else { 0.125 }));
        for corner in [0, 2, 6, 8] {
            assert_eq!(count(corner), 3);
            assert!(w.row(corner).iter().all(|&v| v == 0.0 || v == 1.0 / 3.0));
        }
        for edge in [1, 3, 5, 7] {
            assert_eq!(count(edge), 5);
        }
    }

    #[test]
    fn queen_matches_adjacency_enumeration() {
        for side in 2..7 {
            let w = queen_lattice_weights(side).unwrap();
            let n = side * side;
            for i in 0..n {
                assert_eq!(w[(i, i)], 0.0);
                assert!((w.row(i).sum() - 1.0).abs() < 1e-14);
                for j in 0..n {
                    let dr = (i / side).abs_diff(j / side);
                    let dc = (i % side).abs_diff(j % side);
                    let adjacent = i != j && dr <= 1 && dc <= 1;
                    assert_eq!(w[(i, j)] > 0.0, adjacent);
                    assert_eq!(w[(i, j)] > 0.0, w[(j, i)] > 0.0);
                }
            }
        }
        assert!(matches!(queen_lattice_weights(1), Err(Error::Domain(_))));
    }

    #[test]
    fn true_params_follow_design() {
        let cfg = DgpConfig::default();
        let p = make_true_params(&cfg).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!((p.w[(i, j)] - 0.2).abs() < 1e-15);
                }
            }
            assert!((p.w.row(i).sum() - 0.6).abs() < 1e-14);
        }
        assert_eq!(p.phi.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.3, 0.3, 0.3]);
        assert_eq!(p.beta.as_slice(), &[3.0, 0.0, 2.0]);

        let p9 = make_true_params(&DgpConfig { side: 3, ..DgpConfig::default() }).unwrap();
        assert_eq!(p9.phi.iter().filter(|&&v| v == 0.0).count(), 2);
        assert_eq!(&p9.phi.as_slice()[..3], &[0.0, 0.0, 0.3]);

        let p0 = make_true_params(&DgpConfig { rho: 0.0, ..DgpConfig::default() }).unwrap();
        assert!(p0.w.iter().all(|&v| v == 0.0));
        assert!(stationarity_check(&p9).stationary);
    }

    #[test]
    fn regressors_are_reproducible_and_standard() {
        let cfg = DgpConfig { side: 10, t: 1000, k: 1, ..DgpConfig::default() };
        let a = simulate_regressors(&cfg);
        assert_eq!(a, simulate_regressors(&cfg));
        assert_ne!(a, simulate_regressors(&cfg.replication(1)));
        let draws: Vec<f64> = a.iter().flat_map(|m| m.iter().copied()).collect();
        assert_eq!(draws.len(), 100_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn no_forcing_means_zero_panel() {
        let cfg = DgpConfig { beta_true: vec![0.0; 3], ..DgpConfig::default() };
        let mut params = make_true_params(&cfg).unwrap();
        params.sigma2 = 0.0;
        params.phi.fill(0.0);
        let panel = simulate_panel(&params, &cfg).unwrap();
        assert!(panel.y().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn injected_noise_matches_scalar_oracle() {
        let n = 4;
        let cfg = DgpConfig { t: 3, ..DgpConfig::default() };
        let params = make_true_params(&cfg).unwrap();
        let x = simulate_regressors(&cfg);
        let eps = DMatrix::from_fn(n, 3, |i, t| (i as f64 + 1.0) * 0.1 - t as f64 * 0.2);
        let panel = simulate_with_innovations(&params, x.clone(), &eps).unwrap();

        // explicit inverse of I - W by Gauss-Jordan on scalars
        let mut a = [[0.0f64; 8]; 4];
        for i in 0..n {
            for j in 0..n {
                a[i][j] = if i == j { 1.0 } else { -params.w[(i, j)] };
            }
            a[i][n + i] = 1.0;
        }
        for c in 0..n {
            let piv = a[c][c];
            for v in a[c].iter_mut() {
                *v /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = a[r][c];
                    for cc in 0..2 * n {
                        a[r][cc] -= f * a[c][cc];
                    }
                }
            }
        }
        let mut prev = [0.0f64; 4];
        for t in 0..3 {
            let mut rhs = [0.0f64; 4];
            for i in 0..n {
                rhs[i] = eps[(i, t)] + params.phi[(0, i)] * prev[i];
                for l in 0..3 {
                    rhs[i] += x[t][(i, l)] * params.beta[l];
                }
            }
            let mut y = [0.0f64; 4];
            for i in 0..n {
                for j in 0..n {
                    y[i] += a[i][n + j] * rhs[j];
                }
                assert!((panel.y()[(i, t)] - y[i]).abs() < 1e-12);
            }
            prev = y;
        }
    }

    #[test]
    fn simulation_and_residuals_are_inverse() {
        let cfg = DgpConfig { side: 3, t: 30, ..DgpConfig::default() };
        let params = make_true_params(&cfg).unwrap();
        let eps = DMatrix::from_fn(9, 30, |i, t| ((i * 31 + t * 7) % 11) as f64 / 5.0 - 1.0);
        let panel = simulate_with_innovations(&params, simulate_regressors(&cfg), &eps).unwrap();
        let r = residuals(&params, &panel).unwrap();
        assert!((r - eps.columns(1, 29)).amax() < 1e-10);
    }

    #[test]
    fn refuses_non_stationary_params() {
        let cfg = DgpConfig::default();
        let mut params = make_true_params(&cfg).unwrap();
        params.phi.fill(0.9);
        assert!(matches!(simulate_panel(&params, &cfg), Err(Error::NonStationary { .. })));
    }

    #[test]
    fn panels_are_deterministic() {
        let cfg = DgpConfig { side: 3, t: 50, seed: 11, ..DgpConfig::default() };
        let params = make_true_params(&cfg).unwrap();
        assert_eq!(simulate_panel(&params, &cfg).unwrap(), simulate_panel(&params, &cfg).unwrap());
    }
}
