//! Per-weight saliency for the three pruning methods. Every metric has the
//! shape of `W` (`out_features × in_features`); larger means more important.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calib::CalibStats;
use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wanda,
    SparseGpt,
    Ria,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Wanda, Method::SparseGpt, Method::Ria];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wanda => "wanda",
            Method::SparseGpt => "sparsegpt",
            Method::Ria => "ria",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wanda" => Ok(Method::Wanda),
            "sparsegpt" => Ok(Method::SparseGpt),
            "ria" => Ok(Method::Ria),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected wanda, sparsegpt or ria)"
            ))),
        }
    }
}

/// Denominator of the SparseGPT saliency `W² / d` where `d` is derived from
/// the diagonal of the inverse Hessian.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparseGptSaliency {
    /// `W² / ([H⁻¹]_jj)²`.
    #[default]
    Squared,
    /// `W² / [H⁻¹]_jj`, the classic OBS saliency.
    Unsquared,
}

impl SparseGptSaliency {
    #[inline]
    pub fn apply(self, w: f64, hinv_diag: f64) -> f64 {
        match self {
            SparseGptSaliency::Squared => w * w / (hinv_diag * hinv_diag),
            SparseGptSaliency::Unsquared => w * w / hinv_diag,
        }
    }
}

pub const DEFAULT_RIA_EXPONENT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub method: Method,
    /// Exponent on the activation norm; only read by RIA.
    pub ria_exponent: f64,
    pub sparsegpt_saliency: SparseGptSaliency,
}

impl MetricConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            ria_exponent: DEFAULT_RIA_EXPONENT,
            sparsegpt_saliency: SparseGptSaliency::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Ria && !(0.0..=1.0).contains(&self.ria_exponent) {
            return Err(Error::invalid(format!(
                "RIA exponent {} outside [0, 1]",
                self.ria_exponent
            )));
        }
        Ok(())
    }
}

fn check_width(w: &Matrix, n: usize, layer: &str) -> Result<()> {
    if w.cols() != n {
        return Err(Error::invalid(format!(
            "layer `{layer}`: weight has {} input features but stats have {n}",
            w.cols()
        )));
    }
    Ok(())
}

/// `M_ij = |W_ij| · ‖X_j‖₂`.
pub fn wanda_from_norms(w: &Matrix, col_norms: &[f64]) -> Matrix {
    Matrix::from_fn(w.rows(), w.cols(), |i, j| w[(i, j)].abs() * col_norms[j])
}

pub fn wanda_metric(w: &Matrix, stats: &CalibStats, layer: &str) -> Result<Matrix> {
    let norms = stats.col_norms(layer)?;
    check_width(w, norms.len(), layer)?;
    Ok(wanda_from_norms(w, &norms))
}

/// `M_ij = (|W_ij| / Σ_k|W_kj| + |W_ij| / Σ_k|W_ik|) · ‖X_j‖₂^a`.
///
/// An all-zero row or column contributes zero instead of `0/0`.
pub fn ria_from_norms(w: &Matrix, col_norms: &[f64], a: f64) -> Matrix {
    let (rows, cols) = w.shape();
    let mut col_sum = vec![0.0; cols];
    let mut row_sum = vec![0.0; rows];
    for i in 0..rows {
        for (j, v) in w.row(i).iter().enumerate() {
            col_sum[j] += v.abs();
            row_sum[i] += v.abs();
        }
    }
    let degenerate_rows = row_sum.iter().filter(|&&s| s == 0.0).count();
    let degenerate_cols = col_sum.iter().filter(|&&s| s == 0.0).count();
    if degenerate_rows + degenerate_cols > 0 {
        log::debug!("RIA: {degenerate_rows} all-zero rows and {degenerate_cols} all-zero columns");
    }
    let scale: Vec<f64> = col_norms.iter().map(|n| n.powf(a)).collect();
    Matrix::from_fn(rows, cols, |i, j| {
        let v = w[(i, j)].abs();
        let by_col = if col_sum[j] > 0.0 { v / col_sum[j] } else { 0.0 };
        let by_row = if row_sum[i] > 0.0 { v / row_sum[i] } else { 0.0 };
        (by_col + by_row) * scale[j]
    })
}

pub fn ria_metric(w: &Matrix, stats: &CalibStats, layer: &str, a: f64) -> Result<Matrix> {
    let norms = stats.col_norms(layer)?;
    check_width(w, norms.len(), layer)?;
    Ok(ria_from_norms(w, &norms, a))
}

#[derive(Debug, Clone)]
pub struct SparseGptMetric {
    pub metric: Matrix,
    /// `(Σ x xᵀ + λI)⁻¹`, reused by the OBS update.
    pub h_inv: Matrix,
}

pub fn sparsegpt_from_hessian(
    w: &Matrix,
    h: &Matrix,
    saliency: SparseGptSaliency,
) -> Result<SparseGptMetric> {
    if h.rows() != w.cols() {
        return Err(Error::Shape {
            op: "sparsegpt_metric",
            left: w.shape(),
            right: h.shape(),
        });
    }
    let h_inv = spd_inverse(h)?;
    let d = h_inv.diag();
    let metric = Matrix::from_fn(w.rows(), w.cols(), |i, j| saliency.apply(w[(i, j)], d[j]));
    Ok(SparseGptMetric { metric, h_inv })
}

pub fn sparsegpt_metric(
    w: &Matrix,
    stats: &CalibStats,
    layer: &str,
    saliency: SparseGptSaliency,
) -> Result<SparseGptMetric> {
    let h = stats.damped_gram(layer)?;
    check_width(w, h.rows(), layer)?;
    sparsegpt_from_hessian(w, &h, saliency).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } => Error::Numerical(format!(
            "layer `{layer}`: damped Hessian is not positive definite ({e}); \
             raise the damping fraction"
        )),
        other => other,
    })
}

/// Metric for any method; the SparseGPT inverse Hessian is returned alongside.
pub fn compute_metric(
    w: &Matrix,
    stats: &CalibStats,
    layer: &str,
    cfg: &MetricConfig,
) -> Result<(Matrix, Option<Matrix>)> {
    cfg.validate()?;
    match cfg.method {
        Method::Wanda => Ok((wanda_metric(w, stats, layer)?, None)),
        Method::Ria => Ok((ria_metric(w, stats, layer, cfg.ria_exponent)?, None)),
        Method::SparseGpt => {
            let m = sparsegpt_metric(w, stats, layer, cfg.sparsegpt_saliency)?;
            Ok((m.metric, Some(m.h_inv)))
        }
    }
}
