use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seasonal frequencies with fixed periods in hours. A month is a twelfth
/// of a 365.25-day year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Daily,
    Monthly,
    Biannual,
    Yearly,
    /// Any other period, in hours.
    Period(f64),
}

impl Frequency {
    pub const NAMED: [Frequency; 4] = [Frequency::Daily, Frequency::Monthly, Frequency::Biannual, Frequency::Yearly];

    pub fn period_hours(&self) -> f64 {
        match self {
            Frequency::Daily => 24.0,
            Frequency::Monthly => 730.5,
            Frequency::Biannual => 4383.0,
            Frequency::Yearly => 8766.0,
            Frequency::Period(h) => *h,
        }
    }
}

/// Sine/cosine regressors `sin(2 pi t / L), cos(2 pi t / L)` for each
/// period `L`, with `t = offset_hours + 0, 1, ..` and columns ordered by
/// increasing period (decreasing frequency). Every location gets the same
/// row, so each of the `hours` matrices is `n x 2|frequencies|`.
pub fn fourier_design(n: usize, hours: usize, offset_hours: f64, frequencies: &[Frequency]) -> Result<Vec<DMatrix<f64>>> {
    let mut periods: Vec<f64> = frequencies.iter().map(Frequency::period_hours).collect();
    if let Some(p) = periods.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
        return Err(Error::Config(format!("period {p} must be positive")));
    }
    periods.sort_by(f64::total_cmp);
    periods.dedup();
    Ok((0..hours)
        .map(|h| {
            let t = offset_hours + h as f64;
            let mut row = Vec::with_capacity(2 * periods.len());
            for l in &periods {
                let a = 2.0 * PI * t / l;
                row.push(a.sin());
                row.push(a.cos());
            }
            DMatrix::from_fn(n, row.len(), |_, c| row[c])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_at_origin_and_quarter_day() {
        let x = fourier_design(3, 7, 0.0, &Frequency::NAMED).unwrap();
        assert_eq!(x[0].ncols(), 8);
        for c in 0..4 {
            assert_eq!(x[0][(1, 2 * c)], 0.0);
            assert_eq!(x[0][(1, 2 * c + 1)], 1.0);
        }
        assert!((x[6][(0, 0)] - 1.0).abs() < 1e-15);
        assert!(x[6][(2, 1)].abs() < 1e-15);
    }

    #[test]
    fn columns_average_to_zero_over_a_period() {
        let x = fourier_design(1, 24, 0.0, &[Frequency::Daily]).unwrap();
        for c in 0..2 {
            let mean: f64 = x.iter().map(|m| m[(0, c)]).sum::<f64>() / 24.0;
            assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn ordering_and_empty_set() {
        let x = fourier_design(2, 3, 0.0, &[Frequency::Yearly, Frequency::Daily]).unwrap();
        // daily pair first: at t = 1 its sine is the larger one
        assert!(x[1][(0, 0)] > x[1][(0, 2)]);
        assert_eq!(fourier_design(2, 3, 0.0, &[]).unwrap()[0].ncols(), 0);
        assert!(fourier_design(2, 3, 0.0, &[Frequency::Period(-1.0)]).is_err());
    }
}
