//! Second-moment summary of a panel.
//!
//! With `z_t = [y_t; y_{t-1}; ..; y_{t-P}; X_t e_1; ..; X_t e_k]` every
//! residual is linear in `z_t`: `eps_t = M z_t` with
//! `M = [I - W, -Phi_1, .., -Phi_P, -beta_1 I, .., -beta_k I]`. Hence
//! `SSR = tr(M S M')` for `S = sum_t z_t z_t'`, and likelihood evaluations
//! cost nothing in `T` once `S` is accumulated.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::PanelData;

const CHUNK: usize = 2048;

#[derive(Debug, Clone)]
pub(crate) struct CrossProducts {
    pub n: usize,
    pub k: usize,
    pub lags: usize,
    pub t_eff: usize,
    pub s: DMatrix<f64>,
}

impl CrossProducts {
    /// Accumulates `S` over each segment's time points that have a full lag
    /// history inside the segment. Segments are 0-based half-open ranges.
    pub fn new(panel: &PanelData, segments: &[Range<usize>], lags: usize) -> Result<Self> {
        let (n, k) = (panel.n(), panel.k());
        let m = n * (1 + lags + k);
        let mut times = Vec::new();
        for seg in segments {
            if seg.end > panel.t() || seg.start > seg.end {
                return Err(Error::Dimension(format!(
                    "segment {seg:?} outside 0..{}",
                    panel.t()
                )));
            }
            times.extend(seg.start + lags..seg.end);
        }
        if times.is_empty() {
            return Err(Error::Domain("no time point has a full lag history".into()));
        }
        let mut s = DMatrix::zeros(m, m);
        for chunk in times.chunks(CHUNK) {
            let mut z = DMatrix::zeros(m, chunk.len());
            for (c, &t) in chunk.iter().enumerate() {
                for b in 0..=lags {
                    for i in 0..n {
                        z[(b * n + i, c)] = panel.y()[(i, t - b)];
                    }
                }
                let xt = &panel.x()[t];
                for l in 0..k {
                    for i in 0..n {
                        z[((1 + lags + l) * n + i, c)] = xt[(i, l)];
                    }
                }
            }
            s.gemm(1.0, &z, &z.transpose(), 1.0);
        }
        Ok(Self { n, k, lags, t_eff: times.len(), s })
    }

    pub fn n_obs(&self) -> usize {
        self.n * self.t_eff
    }

    /// Column offset of block `b` (0 = y_t, 1..=P lags, then regressors).
    pub fn block(&self, b: usize) -> usize {
        b * self.n
    }

    pub fn regressor_block(&self, l: usize) -> usize {
        self.block(1 + self.lags + l)
    }

    /// `R = M S`.
    pub fn m_times_s(&self, w: &DMatrix<f64>, phi: &DMatrix<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        let a = DMatrix::identity(n, n) - w;
        let mut r = &a * self.s.rows(0, n);
        for p in 0..self.lags {
            let rows = self.s.rows(self.block(p + 1), n);
            for i in 0..n {
                let f = phi[(p, i)];
                if f != 0.0 {
                    for c in 0..r.ncols() {
                        r[(i, c)] -= f * rows[(i, c)];
                    }
                }
            }
        }
        for l in 0..self.k {
            let b = beta[l];
            if b != 0.0 {
                r -= self.s.rows(self.regressor_block(l), n) * b;
            }
        }
        r
    }

    /// `SSR = sum_ic M_ic R_ic` given `R = M S`.
    pub fn ssr_from(&self, r: &DMatrix<f64>, w: &DMatrix<f64>, phi: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
        let n = self.n;
        let mut ssr = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = if i == j { 1.0 } else { 0.0 } - w[(i, j)];
                ssr += a * r[(i, j)];
            }
            for p in 0..self.lags {
                ssr -= phi[(p, i)] * r[(i, self.block(p + 1) + i)];
            }
            for l in 0..self.k {
                ssr -= beta[l] * r[(i, self.regressor_block(l) + i)];
            }
        }
        ssr
    }

    pub fn ssr(&self, w: &DMatrix<f64>, phi: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
        let r = self.m_times_s(w, phi, beta);
        self.ssr_from(&r, w, phi, beta)
    }

    /// `sum_t X_t' X_t` and `sum_t X_t' y_t`.
    pub fn pooled_regression_moments(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n;
        let xtx = DMatrix::from_fn(self.k, self.k, |l, m| {
            (0..n).map(|i| self.s[(self.regressor_block(l) + i, self.regressor_block(m) + i)]).sum()
        });
        let xty = DVector::from_fn(self.k, |l, _| {
            (0..n).map(|i| self.s[(self.regressor_block(l) + i, i)]).sum()
        });
        (xtx, xty)
    }

    /// `sum_t y_{t-a,i} y_{t-b,i}` for lag blocks `a, b` (0 = current).
    pub fn own_lag_moment(&self, i: usize, a: usize, b: usize) -> f64 {
        self.s[(self.block(a) + i, self.block(b) + i)]
    }
}
