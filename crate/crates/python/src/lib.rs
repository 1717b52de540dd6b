//! Python bindings: panels, parameters, fitting, cross-validation,
//! inference and model comparison.
//!
//! Matrices cross the boundary as nested lists (`y[i][t]`, `x[t][i][l]`,
//! `w[i][j]`, `phi[p][i]`).

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stlasso::cv::{grid_search, product_grid, CvPlan};
use stlasso::evaluate::compare_models;
use stlasso::simulate::{make_true_params, simulate_panel, DgpConfig};
use stlasso::{model, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Domain(_) | Error::Parse(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what} is ragged")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

#[pyclass(name = "Panel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Panel(stlasso::PanelData);

#[pymethods]
impl Panel {
    /// `y[i][t]` responses and `x[t][i][l]` regressors.
    #[new]
    fn new(y: Vec<Vec<f64>>, x: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let y = matrix(&y, "y")?;
        let x = x.iter().map(|xt| matrix(xt, "x[t]")).collect::<PyResult<Vec<_>>>()?;
        stlasso::PanelData::new(y, x).map(Panel).map_err(to_py)
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        let file = std::fs::File::open(path).map_err(|e| PyValueError::new_err(e.to_string()))?;
        stlasso::io::read_panel(std::io::BufReader::new(file)).map(Panel).map_err(to_py)
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        let file = std::fs::File::create(path).map_err(|e| PyValueError::new_err(e.to_string()))?;
        stlasso::io::write_panel(&self.0, file).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn t(&self) -> usize {
        self.0.t()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        rows(self.0.y())
    }

    fn __repr__(&self) -> String {
        format!("Panel(n={}, T={}, k={})", self.0.n(), self.0.t(), self.0.k())
    }
}

#[pyclass(name = "Params", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Params(stlasso::ModelParams);

#[pymethods]
impl Params {
    #[new]
    fn new(beta: Vec<f64>, phi: Vec<Vec<f64>>, w: Vec<Vec<f64>>, sigma2: f64) -> PyResult<Self> {
        stlasso::ModelParams::new(DVector::from_vec(beta), matrix(&phi, "phi")?, matrix(&w, "w")?, sigma2)
            .map(Params)
            .map_err(to_py)
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.0.beta.iter().copied().collect()
    }

    #[getter]
    fn phi(&self) -> Vec<Vec<f64>> {
        rows(&self.0.phi)
    }

    #[getter]
    fn w(&self) -> Vec<Vec<f64>> {
        rows(&self.0.w)
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.0.sigma2
    }

    fn log_likelihood(&self, panel: &Panel) -> PyResult<f64> {
        model::log_likelihood(&self.0, &panel.0).map_err(to_py)
    }

    fn residuals(&self, panel: &Panel) -> PyResult<Vec<Vec<f64>>> {
        model::residuals(&self.0, &panel.0).map(|r| rows(&r)).map_err(to_py)
    }

    /// Stationarity report as a dict.
    fn stationarity<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = model::stationarity_check(&self.0);
        let d = PyDict::new(py);
        d.set_item("stationary", s.stationary)?;
        d.set_item("norm_value", s.norm_value)?;
        d.set_item("max_row_sum", s.max_row_sum)?;
        d.set_item("max_lag_sum", s.max_lag_sum)?;
        d.set_item("sufficient_bounds", s.sufficient_bounds)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Params(n={}, k={}, lags={}, sigma2={})", self.0.n(), self.0.k(), self.0.lags(), self.0.sigma2)
    }
}

#[pyclass(name = "FitResult", frozen)]
struct FitResult(stlasso::FitResult);

#[pymethods]
impl FitResult {
    #[getter]
    fn params(&self) -> Params {
        Params(self.0.params.clone())
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.0.objective
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.0.loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.iterations
    }

    #[getter]
    fn penalty(&self) -> (f64, f64, f64) {
        let p = self.0.penalty;
        (p.lambda1, p.lambda2, p.lambda3)
    }

    /// Nonzero weights as `(i, j)` pairs.
    #[getter]
    fn active_weights(&self) -> Vec<(usize, usize)> {
        self.0.active_sets.w.clone()
    }

    /// The versioned JSON document written by the command-line tool.
    fn to_json(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        stlasso::io::write_fit(&self.0, &mut buf).map_err(to_py)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        stlasso::io::read_fit(text.as_bytes()).map(FitResult).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("FitResult(objective={}, converged={})", self.0.objective, self.0.converged)
    }
}

fn penalty(lambda1: f64, lambda2: f64, lambda3: f64) -> PyResult<stlasso::PenaltyConfig> {
    stlasso::PenaltyConfig::new(lambda1, lambda2, lambda3).map_err(to_py)
}

fn solver(lags: usize, max_iter: usize) -> stlasso::SolverOptions {
    stlasso::SolverOptions { lags, max_iter, ..Default::default() }
}

/// Simulates a panel on a `side x side` queen lattice; returns the panel
/// and the true parameters.
#[pyfunction]
#[pyo3(signature = (side=2, t=200, seed=0, rho=0.6))]
fn simulate(side: usize, t: usize, seed: u64, rho: f64) -> PyResult<(Panel, Params)> {
    let cfg = DgpConfig { side, t, seed, rho, ..DgpConfig::default() };
    let truth = make_true_params(&cfg).map_err(to_py)?;
    let panel = simulate_panel(&truth, &cfg).map_err(to_py)?;
    Ok((Panel(panel), Params(truth)))
}

#[pyfunction]
#[pyo3(signature = (panel, lambda1=0.1, lambda2=0.1, lambda3=0.1, lags=1, max_iter=2000))]
fn fit(py: Python<'_>, panel: &Panel, lambda1: f64, lambda2: f64, lambda3: f64, lags: usize, max_iter: usize) -> PyResult<FitResult> {
    let pen = penalty(lambda1, lambda2, lambda3)?;
    let opts = solver(lags, max_iter);
    py.detach(|| stlasso::fit(&panel.0, &pen, &opts)).map(FitResult).map_err(to_py)
}

/// Blocked cross-validation over the product of the three value lists;
/// returns the selected `(lambda1, lambda2, lambda3)` and the refit.
#[pyfunction]
#[pyo3(signature = (panel, lambda1, lambda2, lambda3, n_blocks=5, lags=1))]
fn cross_validate(
    py: Python<'_>,
    panel: &Panel,
    lambda1: Vec<f64>,
    lambda2: Vec<f64>,
    lambda3: Vec<f64>,
    n_blocks: usize,
    lags: usize,
) -> PyResult<((f64, f64, f64), FitResult)> {
    let plan = CvPlan { n_blocks, grid: product_grid(&lambda1, &lambda2, &lambda3), refit_full: true };
    let opts = solver(lags, 2000);
    let res = py.detach(|| grid_search(&panel.0, &plan, &opts)).map_err(to_py)?;
    let b = res.best;
    let fit = res.fit.ok_or_else(|| PyRuntimeError::new_err("no refit produced"))?;
    Ok(((b.lambda1, b.lambda2, b.lambda3), FitResult(fit)))
}

/// Post-selection refit with Wald statistics, one dict per coordinate.
#[pyfunction]
#[pyo3(signature = (panel, fit, tau=0.0))]
fn infer<'py>(py: Python<'py>, panel: &Panel, fit: &FitResult, tau: f64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let opts = solver(fit.0.params.lags(), 2000);
    let res = py.detach(|| stlasso::inference::infer(&panel.0, &fit.0.params, &opts, tau)).map_err(to_py)?;
    res.rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("parameter", &r.parameter)?;
            d.set_item("group", r.group.as_str())?;
            d.set_item("estimate", r.estimate)?;
            d.set_item("se", r.se)?;
            d.set_item("z", r.z)?;
            d.set_item("lcl", r.lcl)?;
            d.set_item("ucl", r.ucl)?;
            Ok(d)
        })
        .collect()
}

/// MSE, AIC and BIC of the fit against VAR(1) and OLS baselines.
#[pyfunction]
fn compare<'py>(py: Python<'py>, panel: &Panel, fit: &FitResult) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let table = compare_models(&fit.0, &panel.0).map_err(to_py)?;
    table
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("model", &r.model)?;
            d.set_item("mse", r.mse)?;
            d.set_item("aic", r.aic)?;
            d.set_item("bic", r.bic)?;
            d.set_item("loglik", r.loglik)?;
            d.set_item("n_params", r.n_params)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn pystlasso(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Panel>()?;
    m.add_class::<Params>()?;
    m.add_class::<FitResult>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
