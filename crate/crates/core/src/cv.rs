//! Penalty selection by blocked cross-validation over time.
//!
//! The time axis is cut into contiguous blocks. Each block is held out in
//! turn; the model is fitted on the remaining blocks, each remaining
//! stretch of time treated as its own conditional-likelihood segment so no
//! lag ever reaches across a removed block. Held-out points are scored by
//! one-step-ahead prediction with observed lags.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{one_step_predictions, PanelData};
use crate::optimize::{fit, fit_segments, FitResult, PenaltyConfig, SolverOptions};

/// Per-penalty values of the default grid.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub n_blocks: usize,
    pub grid: Vec<PenaltyConfig>,
    /// Refit on the whole panel at the selected penalties.
    pub refit_full: bool,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self { n_blocks: 5, grid: default_grid(), refit_full: true }
    }
}

impl CvPlan {
    pub fn validate(&self, t: usize, lags: usize) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("penalty grid is empty".into()));
        }
        for pen in &self.grid {
            pen.validate()?;
        }
        block_split(t, self.n_blocks, lags).map(|_| ())
    }
}

/// Full Cartesian product of [`DEFAULT_LAMBDAS`] (125 triples).
pub fn default_grid() -> Vec<PenaltyConfig> {
    product_grid(&DEFAULT_LAMBDAS, &DEFAULT_LAMBDAS, &DEFAULT_LAMBDAS)
}

/// Cartesian product grid, `lambda1` varying slowest.
pub fn product_grid(lambda1: &[f64], lambda2: &[f64], lambda3: &[f64]) -> Vec<PenaltyConfig> {
    let mut grid = Vec::with_capacity(lambda1.len() * lambda2.len() * lambda3.len());
    for &a in lambda1 {
        for &b in lambda2 {
            for &c in lambda3 {
                grid.push(PenaltyConfig { lambda1: a, lambda2: b, lambda3: c });
            }
        }
    }
    grid
}

/// Splits `0..t` into `n_blocks` contiguous ranges whose sizes differ by
/// at most one, the larger blocks first. Every block must hold at least
/// `lags + 2` time points.
pub fn block_split(t: usize, n_blocks: usize, lags: usize) -> Result<Vec<Range<usize>>> {
    if n_blocks < 2 {
        return Err(Error::Config(format!("need at least 2 blocks, got {n_blocks}")));
    }
    if t < n_blocks * (lags + 2) {
        return Err(Error::Domain(format!(
            "T = {t} is too short for {n_blocks} blocks of at least {} points",
            lags + 2
        )));
    }
    let (base, extra) = (t / n_blocks, t % n_blocks);
    let mut start = 0;
    Ok((0..n_blocks)
        .map(|b| {
            let len = base + usize::from(b < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub penalty: PenaltyConfig,
    pub fold: usize,
    /// Held-out prediction RMSE of this fold (NaN when failed).
    pub rmse: f64,
    pub sse: f64,
    pub count: usize,
    pub status: FoldStatus,
}

fn score_fold(
    panel: &PanelData,
    pen: &PenaltyConfig,
    blocks: &[Range<usize>],
    fold: usize,
    opts: &SolverOptions,
) -> FoldScore {
    let held = &blocks[fold];
    let mut train: Vec<Range<usize>> = Vec::new();
    if held.start > 0 {
        train.push(0..held.start);
    }
    if held.end < panel.t() {
        train.push(held.end..panel.t());
    }
    let times: Vec<usize> = held.clone().filter(|&t| t >= opts.lags).collect();
    let outcome = fit_segments(panel, &train, pen, opts, None).and_then(|res| {
        let pred = one_step_predictions(&res.params, panel, &times)?;
        let mut sse = 0.0;
        for (c, &t) in times.iter().enumerate() {
            for i in 0..panel.n() {
                sse += (pred[(i, c)] - panel.y()[(i, t)]).powi(2);
            }
        }
        if sse.is_finite() {
            Ok(sse)
        } else {
            Err(Error::Numerical { message: "non-finite prediction error".into(), trace: res.trace })
        }
    });
    let count = times.len() * panel.n();
    match outcome {
        Ok(sse) => FoldScore {
            penalty: *pen,
            fold,
            rmse: (sse / count as f64).sqrt(),
            sse,
            count,
            status: FoldStatus::Ok,
        },
        Err(e) => FoldScore {
            penalty: *pen,
            fold,
            rmse: f64::NAN,
            sse: f64::NAN,
            count,
            status: FoldStatus::Failed(e.to_string()),
        },
    }
}

/// Pooled RMSE over all held-out observations, or `+inf` if any fold
/// failed.
fn pooled(folds: &[FoldScore]) -> f64 {
    if folds.iter().any(|f| f.status != FoldStatus::Ok) {
        return f64::INFINITY;
    }
    let sse: f64 = folds.iter().map(|f| f.sse).sum();
    let count: usize = folds.iter().map(|f| f.count).sum();
    (sse / count as f64).sqrt()
}

/// Cross-validated prediction RMSE of one penalty triple; `+inf` when any
/// fold fit fails.
pub fn cv_score(panel: &PanelData, pen: &PenaltyConfig, plan: &CvPlan, opts: &SolverOptions) -> Result<f64> {
    pen.validate()?;
    opts.validate()?;
    let blocks = block_split(panel.t(), plan.n_blocks, opts.lags)?;
    let folds: Vec<FoldScore> =
        (0..blocks.len()).into_par_iter().map(|b| score_fold(panel, pen, &blocks, b, opts)).collect();
    Ok(pooled(&folds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub penalty: PenaltyConfig,
    pub score: f64,
    pub failed_folds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridResult {
    pub best: PenaltyConfig,
    pub best_score: f64,
    /// One row per triple, in grid order.
    pub table: Vec<GridRow>,
    pub folds: Vec<FoldScore>,
    pub fit: Option<FitResult>,
}

impl GridResult {
    /// Writes the per-fold score table as CSV
    /// (`lambda1,lambda2,lambda3,fold,rmse,status`); folds are 1-based.
    pub fn write_scores<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["lambda1", "lambda2", "lambda3", "fold", "rmse", "status"])?;
        for f in &self.folds {
            let status = match &f.status {
                FoldStatus::Ok => "ok".to_string(),
                FoldStatus::Failed(msg) => format!("failed: {msg}"),
            };
            wtr.write_record([
                f.penalty.lambda1.to_string(),
                f.penalty.lambda2.to_string(),
                f.penalty.lambda3.to_string(),
                (f.fold + 1).to_string(),
                f.rmse.to_string(),
                status,
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Scores every triple of `plan.grid` and returns the minimizer. Exact
/// ties go to the sparser model: larger `lambda1`, then `lambda2`, then
/// `lambda3`.
pub fn grid_search(panel: &PanelData, plan: &CvPlan, opts: &SolverOptions) -> Result<GridResult> {
    opts.validate()?;
    plan.validate(panel.t(), opts.lags)?;
    let blocks = block_split(panel.t(), plan.n_blocks, opts.lags)?;
    let jobs: Vec<(usize, usize)> =
        (0..plan.grid.len()).flat_map(|g| (0..blocks.len()).map(move |b| (g, b))).collect();
    let folds: Vec<FoldScore> = jobs
        .into_par_iter()
        .map(|(g, b)| score_fold(panel, &plan.grid[g], &blocks, b, opts))
        .collect();

    let table: Vec<GridRow> = folds
        .chunks(blocks.len())
        .map(|chunk| GridRow {
            penalty: chunk[0].penalty,
            score: pooled(chunk),
            failed_folds: chunk.iter().filter(|f| f.status != FoldStatus::Ok).count(),
        })
        .collect();

    let best = table
        .iter()
        .filter(|r| r.score.is_finite())
        .min_by(|a, b| {
            a.score
                .total_cmp(&b.score)
                .then(b.penalty.lambda1.total_cmp(&a.penalty.lambda1))
                .then(b.penalty.lambda2.total_cmp(&a.penalty.lambda2))
                .then(b.penalty.lambda3.total_cmp(&a.penalty.lambda3))
        })
        .cloned()
        .ok_or_else(|| {
            let first = folds.iter().find_map(|f| match &f.status {
                FoldStatus::Failed(m) => Some(m.clone()),
                FoldStatus::Ok => None,
            });
            Error::Search(format!("{} triples; first failure: {}", table.len(), first.unwrap_or_default()))
        })?;

    let fit = if plan.refit_full { Some(fit(panel, &best.penalty, opts)?) } else { None };
    Ok(GridResult { best: best.penalty, best_score: best.score, table, folds, fit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn blocks_cover_time_in_order() {
        let b = block_split(100, 5, 1).unwrap();
        assert_eq!(b, vec![0..20, 20..40, 40..60, 60..80, 80..100]);
        assert_eq!(block_split(10, 2, 1).unwrap(), vec![0..5, 5..10]);
        let sizes: Vec<usize> = block_split(11, 5, 0).unwrap().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
    }

    #[test]
    fn short_series_and_bad_plans_are_rejected() {
        assert!(block_split(14, 5, 1).is_err());
        assert!(block_split(100, 1, 1).is_err());
        let plan = CvPlan { grid: vec![], ..CvPlan::default() };
        assert!(plan.validate(100, 1).is_err());
    }

    #[test]
    fn default_grid_is_full_product() {
        let g = default_grid();
        assert_eq!(g.len(), 125);
        assert_eq!(g[0], PenaltyConfig { lambda1: 0.001, lambda2: 0.001, lambda3: 0.001 });
        assert_eq!(g[124], PenaltyConfig { lambda1: 10.0, lambda2: 10.0, lambda3: 10.0 });
    }

    #[test]
    fn zero_panel_scores_zero() {
        let y = DMatrix::zeros(3, 30);
        let x = vec![DMatrix::zeros(3, 2); 30];
        let panel = PanelData::new(y, x).unwrap();
        let plan = CvPlan { grid: vec![PenaltyConfig::uniform(0.1).unwrap()], ..CvPlan::default() };
        let s = cv_score(&panel, &plan.grid[0], &plan, &SolverOptions::default()).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn ties_prefer_sparser_triples() {
        let y = DMatrix::zeros(3, 30);
        let x = vec![DMatrix::zeros(3, 1); 30];
        let panel = PanelData::new(y, x).unwrap();
        let grid = vec![
            PenaltyConfig::new(0.1, 1.0, 1.0).unwrap(),
            PenaltyConfig::new(1.0, 0.1, 0.1).unwrap(),
            PenaltyConfig::new(1.0, 0.1, 0.5).unwrap(),
        ];
        let plan = CvPlan { grid, n_blocks: 3, refit_full: false };
        let res = grid_search(&panel, &plan, &SolverOptions::default()).unwrap();
        assert_eq!(res.best, PenaltyConfig::new(1.0, 0.1, 0.5).unwrap());
        assert!(res.table.iter().all(|r| r.score == 0.0));
    }
}
