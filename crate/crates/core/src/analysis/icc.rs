use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ICC(2,1) with its two-way ANOVA mean squares and variance components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    pub icc: f64,
    pub ms_rows: f64,
    pub ms_cols: f64,
    pub ms_error: f64,
    pub var_subject: f64,
    pub var_condition: f64,
    pub var_residual: f64,
}

/// Two-way random-effects, absolute-agreement, single-measurement ICC of an
/// `n subjects x k conditions` table. `Ok(None)` when the table is constant
/// up to rounding (spread below 1e-12 of its scale).
pub fn compute_icc(table: &Array2<f64>) -> Result<Option<Icc>> {
    let (n, k) = table.dim();
    if n < 5 || k < 2 {
        return Err(Error::Parameter(format!("ICC needs >= 5 subjects and >= 2 conditions, got {n} x {k}")));
    }
    if table.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("ICC table has missing or non-finite cells".into()));
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = table.sum() / (nf * kf);
    let ss_total: f64 = table.iter().map(|v| (v - grand).powi(2)).sum();
    let tol = 1e-12 * (1.0 + grand.abs());
    if ss_total <= tol * tol * nf * kf {
        return Ok(None);
    }
    let row_mean: Vec<f64> = table.rows().into_iter().map(|r| r.sum() / kf).collect();
    let col_mean: Vec<f64> = table.columns().into_iter().map(|c| c.sum() / nf).collect();
    let ss_rows: f64 = row_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>() * kf;
    let ss_cols: f64 = col_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>() * nf;
    let ss_error: f64 = table.indexed_iter().map(|((i, j), v)| (v - row_mean[i] - col_mean[j] + grand).powi(2)).sum();
    let ms_rows = ss_rows / (nf - 1.0);
    let ms_cols = ss_cols / (kf - 1.0);
    let ms_error = ss_error / ((nf - 1.0) * (kf - 1.0));
    let denom = ms_rows + (kf - 1.0) * ms_error + kf / nf * (ms_cols - ms_error);
    let icc = if denom > 0.0 { (ms_rows - ms_error) / denom } else { 0.0 };
    Ok(Some(Icc {
        icc: icc.clamp(-1.0, 1.0),
        ms_rows,
        ms_cols,
        ms_error,
        var_subject: (ms_rows - ms_error) / kf,
        var_condition: (ms_cols - ms_error) / nf,
        var_residual: ms_error,
    }))
}
