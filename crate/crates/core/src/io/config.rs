//! TOML run configuration shared by all subcommands.
//!
//! ```toml
//! seed = 7
//! lags = 1
//!
//! [data]
//! panel = "panel.csv"
//!
//! [penalty]
//! lambda1 = 0.1
//! lambda2 = 0.1
//! lambda3 = 0.1
//!
//! [grid]
//! lambda1 = [0.01, 0.1, 1.0]
//! n_blocks = 5
//! ```
//!
//! Every section is optional. Relative paths are resolved against the
//! directory of the config file.

use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::cv::{product_grid, CvPlan, DEFAULT_LAMBDAS};
use crate::error::{Error, Result};
use crate::io::fourier::Frequency;
use crate::io::ingest::DEFAULT_COMPLETENESS;
use crate::optimize::{PenaltyConfig, SolverOptions};
use crate::simulate::DgpConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Long-format panel CSV (see [`crate::io::read_panel`]).
    pub panel: Option<PathBuf>,
    /// FitResult JSON.
    pub fit: Option<PathBuf>,
    /// Raw `station_id,timestamp,value` measurements.
    pub measurements: Option<PathBuf>,
    pub stations: Option<PathBuf>,
    pub completeness: Option<f64>,
    /// Ingestion window, ISO-8601; defaults to the span of the file.
    pub start: Option<String>,
    pub end: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FourierConfig {
    pub frequencies: Vec<Frequency>,
    /// Additional periods in hours, one sine/cosine pair each.
    pub extra_periods: Vec<f64>,
}

impl Default for FourierConfig {
    fn default() -> Self {
        Self { frequencies: Frequency::NAMED.to_vec(), extra_periods: Vec::new() }
    }
}

impl FourierConfig {
    pub fn all(&self) -> Vec<Frequency> {
        let mut f = self.frequencies.clone();
        f.extend(self.extra_periods.iter().map(|&p| Frequency::Period(p)));
        f
    }
}

/// Penalty grid as per-component value lists; the Cartesian product is
/// searched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub lambda3: Vec<f64>,
    pub n_blocks: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDAS.to_vec(),
            lambda2: DEFAULT_LAMBDAS.to_vec(),
            lambda3: DEFAULT_LAMBDAS.to_vec(),
            n_blocks: CvPlan::default().n_blocks,
        }
    }
}

impl GridConfig {
    pub fn plan(&self) -> CvPlan {
        CvPlan { n_blocks: self.n_blocks, grid: product_grid(&self.lambda1, &self.lambda2, &self.lambda3), refit_full: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McCell {
    pub side: usize,
    #[serde(rename = "T")]
    pub t: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Tuning {
    /// Blocked CV over `[grid]` in every replication.
    #[default]
    Cv,
    /// The `[penalty]` triple throughout.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub reps: usize,
    /// `(n, T)` cells of the output table; the remaining DGP settings come
    /// from `[dgp]`.
    pub cells: Vec<McCell>,
    pub tuning: Tuning,
    pub start_at_truth: bool,
    /// Write per-replication and mean timings (makes outputs run-dependent).
    pub with_time: bool,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            reps: 20,
            cells: vec![McCell { side: 2, t: 50 }, McCell { side: 2, t: 200 }],
            tuning: Tuning::Cv,
            start_at_truth: false,
            with_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Temporal lag order `P`.
    pub lags: usize,
    pub out: Option<PathBuf>,
    pub data: DataPaths,
    pub penalty: PenaltyConfig,
    pub grid: GridConfig,
    pub solver: SolverOptions,
    pub dgp: DgpConfig,
    pub mc: McSection,
    pub fourier: FourierConfig,
    /// Zero threshold used to read the support off a penalized fit before
    /// inference.
    pub support_tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lags: 1,
            out: None,
            data: DataPaths::default(),
            penalty: PenaltyConfig::uniform(0.1).expect("valid"),
            grid: GridConfig::default(),
            solver: SolverOptions::default(),
            dgp: DgpConfig::default(),
            mc: McSection::default(),
            fourier: FourierConfig::default(),
            support_tau: 0.0,
        }
    }
}

fn parse_window_edge(s: &Option<String>) -> Result<Option<NaiveDateTime>> {
    s.as_deref().map(crate::io::ingest::parse_timestamp).transpose()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and makes its relative data paths relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let d = &mut cfg.data;
        for p in [&mut d.panel, &mut d.fit, &mut d.measurements, &mut d.stations, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.lags < 1 {
            return Err(Error::Config("lags must be at least 1".into()));
        }
        self.penalty.validate()?;
        self.solver.validate()?;
        if self.grid.lambda1.is_empty() || self.grid.lambda2.is_empty() || self.grid.lambda3.is_empty() {
            return Err(Error::Config("every grid component needs at least one value".into()));
        }
        if let Some(c) = self.data.completeness {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("completeness {c} outside [0, 1]")));
            }
        }
        if !(self.support_tau >= 0.0) {
            return Err(Error::Config("support_tau must be nonnegative".into()));
        }
        parse_window_edge(&self.data.start)?;
        parse_window_edge(&self.data.end)?;
        Ok(())
    }

    /// Solver options with the run's lag order and seed applied.
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions { lags: self.lags, seed: self.seed, ..self.solver.clone() }
    }

    pub fn completeness(&self) -> f64 {
        self.data.completeness.unwrap_or(DEFAULT_COMPLETENESS)
    }

    pub fn window(&self) -> Result<Option<(NaiveDateTime, NaiveDateTime)>> {
        match (parse_window_edge(&self.data.start)?, parse_window_edge(&self.data.end)?) {
            (Some(a), Some(b)) => Ok(Some((a, b))),
            (None, None) => Ok(None),
            _ => Err(Error::Config("give both data.start and data.end, or neither".into())),
        }
    }

    /// Fails with a configuration error naming the missing key or file.
    pub fn require_path<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        let p = path.as_deref().ok_or_else(|| Error::Config(format!("{key} is not set")))?;
        if !p.exists() {
            return Err(Error::Config(format!("{key} = {} does not exist", p.display())));
        }
        Ok(p)
    }
}
