//! Versioned JSON form of a [`FitResult`].
//!
//! Matrices are stored flat: `w` dense row-major (`w[i * n + j]` is the
//! weight of location `j` in the equation of location `i`), `phi` lag-major
//! (`phi[p * n + i]`). The JSON Schema lives in `docs/fit_result.schema.json`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{stationarity_check, ModelParams, StationarityReport};
use crate::optimize::{ActiveSets, FitResult, PenaltyConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDocument {
    pub schema_version: u32,
    pub n: usize,
    pub k: usize,
    pub lags: usize,
    pub beta: Vec<f64>,
    pub phi: Vec<f64>,
    pub w: Vec<f64>,
    pub sigma2: f64,
    pub penalty: PenaltyConfig,
    pub objective: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    pub feasible: bool,
    pub active_sets: ActiveSets,
    pub trace: Vec<f64>,
    pub stationarity: StationarityDoc,
}

/// [`StationarityReport`] with the norm `null` when it is infinite
/// (singular `I - W`). Informational only: reading a document recomputes
/// the report from the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationarityDoc {
    pub stationary: bool,
    pub norm_value: Option<f64>,
    pub max_row_sum: f64,
    pub max_lag_sum: f64,
    pub sufficient_bounds: bool,
}

impl From<StationarityReport> for StationarityDoc {
    fn from(r: StationarityReport) -> Self {
        Self {
            stationary: r.stationary,
            norm_value: r.norm_value.is_finite().then_some(r.norm_value),
            max_row_sum: r.max_row_sum,
            max_lag_sum: r.max_lag_sum,
            sufficient_bounds: r.sufficient_bounds,
        }
    }
}

impl From<&FitResult> for FitDocument {
    fn from(f: &FitResult) -> Self {
        let p = &f.params;
        let (n, lags) = (p.n(), p.lags());
        Self {
            schema_version: SCHEMA_VERSION,
            n,
            k: p.beta.len(),
            lags,
            beta: p.beta.iter().copied().collect(),
            phi: (0..lags).flat_map(|l| (0..n).map(move |i| p.phi[(l, i)])).collect(),
            w: (0..n).flat_map(|i| (0..n).map(move |j| p.w[(i, j)])).collect(),
            sigma2: p.sigma2,
            penalty: f.penalty,
            objective: f.objective,
            loglik: f.loglik,
            iterations: f.iterations,
            outer_iterations: f.outer_iterations,
            converged: f.converged,
            feasible: f.feasible,
            active_sets: f.active_sets.clone(),
            trace: f.trace.clone(),
            stationarity: f.stationarity.into(),
        }
    }
}

impl FitDocument {
    pub fn params(&self) -> Result<ModelParams> {
        ParamsDocument {
            schema_version: self.schema_version,
            n: self.n,
            k: self.k,
            lags: self.lags,
            beta: self.beta.clone(),
            phi: self.phi.clone(),
            w: self.w.clone(),
            sigma2: self.sigma2,
        }
        .params()
    }

    pub fn into_fit(self) -> Result<FitResult> {
        let params = self.params()?;
        Ok(FitResult {
            objective: self.objective,
            loglik: self.loglik,
            iterations: self.iterations,
            outer_iterations: self.outer_iterations,
            converged: self.converged,
            feasible: self.feasible,
            active_sets: self.active_sets,
            trace: self.trace,
            penalty: self.penalty,
            stationarity: stationarity_check(&params),
            params,
        })
    }
}

/// Parameters alone, in the same flat layout as [`FitDocument`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub schema_version: u32,
    pub n: usize,
    pub k: usize,
    pub lags: usize,
    pub beta: Vec<f64>,
    pub phi: Vec<f64>,
    pub w: Vec<f64>,
    pub sigma2: f64,
}

impl From<&ModelParams> for ParamsDocument {
    fn from(p: &ModelParams) -> Self {
        let (n, lags) = (p.n(), p.lags());
        Self {
            schema_version: SCHEMA_VERSION,
            n,
            k: p.beta.len(),
            lags,
            beta: p.beta.iter().copied().collect(),
            phi: (0..lags).flat_map(|l| (0..n).map(move |i| p.phi[(l, i)])).collect(),
            w: (0..n).flat_map(|i| (0..n).map(move |j| p.w[(i, j)])).collect(),
            sigma2: p.sigma2,
        }
    }
}

impl ParamsDocument {
    pub fn params(&self) -> Result<ModelParams> {
        let (n, lags) = (self.n, self.lags);
        if self.w.len() != n * n || self.phi.len() != lags * n || self.beta.len() != self.k {
            return Err(Error::Parse(format!(
                "array lengths (beta {}, phi {}, w {}) do not match n = {n}, k = {}, lags = {lags}",
                self.beta.len(),
                self.phi.len(),
                self.w.len(),
                self.k
            )));
        }
        ModelParams::new(
            DVector::from_column_slice(&self.beta),
            DMatrix::from_row_slice(lags, n, &self.phi),
            DMatrix::from_row_slice(n, n, &self.w),
            self.sigma2,
        )
    }
}

pub fn write_params<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, &ParamsDocument::from(params))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Reads the parameters out of either a fit or a parameters document.
pub fn read_params<R: Read>(input: R) -> Result<ModelParams> {
    let value: serde_json::Value = serde_json::from_reader(input)?;
    check_version(&value)?;
    let doc: ParamsDocument = serde_json::from_value(value)?;
    doc.params()
}

fn check_version(value: &serde_json::Value) -> Result<()> {
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => Ok(()),
        Some(v) => Err(Error::Parse(format!("unsupported schema version {v}"))),
        None => Err(Error::Parse("document has no schema_version".into())),
    }
}

pub fn write_fit<W: Write>(fit: &FitResult, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, &FitDocument::from(fit))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_fit<R: Read>(input: R) -> Result<FitResult> {
    let value: serde_json::Value = serde_json::from_reader(input)?;
    check_version(&value)?;
    let doc: FitDocument = serde_json::from_value(value)?;
    doc.into_fit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::{fit, SolverOptions};
    use crate::simulate::{make_true_params, simulate_panel, DgpConfig};

    #[test]
    fn round_trip_preserves_the_fit() {
        let cfg = DgpConfig { t: 60, ..DgpConfig::default() };
        let panel = simulate_panel(&make_true_params(&cfg).unwrap(), &cfg).unwrap();
        let res = fit(&panel, &PenaltyConfig::uniform(0.1).unwrap(), &SolverOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_fit(&res, &mut buf).unwrap();
        let back = read_fit(buf.as_slice()).unwrap();
        assert_eq!(back, res);
        assert_eq!(read_params(buf.as_slice()).unwrap(), res.params);
        let mut p = Vec::new();
        write_params(&res.params, &mut p).unwrap();
        assert_eq!(read_params(p.as_slice()).unwrap(), res.params);
    }

    #[test]
    fn layout_is_row_major() {
        let mut p = ModelParams::zeros(3, 2, 1, 1.0);
        p.w[(0, 2)] = 0.25;
        p.phi[(0, 1)] = 0.5;
        let res = FitResult {
            active_sets: ActiveSets::of(&p),
            stationarity: crate::model::stationarity_check(&p),
            params: p,
            objective: 0.0,
            loglik: 0.0,
            iterations: 0,
            outer_iterations: 0,
            converged: true,
            feasible: true,
            trace: vec![],
            penalty: PenaltyConfig::default(),
        };
        let doc = FitDocument::from(&res);
        assert_eq!(doc.w[2], 0.25);
        assert_eq!(doc.phi, vec![0.0, 0.5, 0.0]);
        assert_eq!(doc.active_sets.w, vec![(0, 2)]);
    }

    #[test]
    fn other_versions_are_refused() {
        assert!(read_fit(r#"{"schema_version": 2}"#.as_bytes()).is_err());
        assert!(read_fit(r#"{"n": 2}"#.as_bytes()).is_err());
    }
}
