//! SparseGPT-style pruning with Optimal Brain Surgeon compensation.
//!
//! Columns are processed left to right. With `U` the upper Cholesky factor of
//! `H⁻¹` (`H⁻¹ = UᵀU`), the inverse Hessian restricted to the not yet frozen
//! columns `F = {j, j+1, ..}` is `U_FFᵀ U_FF`, so pruning `w_j` is compensated
//! by `δw_F = -(w_j / U_jj) · U_{j,F}` and the current saliency of a later
//! column `q` uses `[H_F⁻¹]_qq = Σ_{i=j..q} U_iq²`.
//!
//! Unstructured selection happens at the start of every block: each row's
//! remaining prune quota is assigned to the lowest-saliency entries among all
//! unfrozen columns, and those falling inside the block are pruned. N:M groups
//! are decided when the sweep reaches the group.

use super::mask::{kept_count, rank_desc, validate_permutation, Group, Pattern, PruneMask};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, Matrix};
use crate::metrics::SparseGptSaliency;

pub const DEFAULT_BLOCK_SIZE: usize = 128;
const MIN_HINV_DIAG: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsConfig {
    pub block_size: usize,
    pub saliency: SparseGptSaliency,
    pub group: Group,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            saliency: SparseGptSaliency::default(),
            group: Group::PerRow,
        }
    }
}

/// Indices (into `cands`) of the `count` entries to prune: the tail of the
/// shared keep ranking.
fn lowest(cands: &[(f64, usize)], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| rank_desc(cands[a], cands[b]));
    order[cands.len() - count..].to_vec()
}

/// Prunes `w` to `pattern` and compensates the surviving weights. Returns the
/// updated weights and the final mask (both in the original column order).
pub fn obs_prune(
    layer: &str,
    w: &Matrix,
    h_inv: &Matrix,
    pattern: Pattern,
    permutation: Option<Vec<usize>>,
    cfg: &ObsConfig,
) -> Result<(Matrix, PruneMask)> {
    pattern.validate()?;
    let (rows, cols) = w.shape();
    if h_inv.shape() != (cols, cols) {
        return Err(Error::Shape {
            op: "obs_prune",
            left: w.shape(),
            right: h_inv.shape(),
        });
    }
    if let Pattern::NOfM { m, .. } = pattern {
        if cols % m != 0 {
            return Err(Error::invalid(format!(
                "layer `{layer}`: {cols} columns not divisible by N:M group size {m}"
            )));
        }
    }
    let perm = match &permutation {
        Some(p) => {
            validate_permutation(p, cols).map_err(|e| Error::invalid(e.to_string()))?;
            p.clone()
        }
        None => (0..cols).collect(),
    };
    let mut cur = w.select_columns(&perm);
    let hp = h_inv.select_symmetric(&perm);
    let u = cholesky(&hp)
        .map_err(|e| Error::Numerical(format!("layer `{layer}`: inverse Hessian factorization failed ({e})")))?
        .transpose();
    for j in 0..cols {
        if u[(j, j)] * u[(j, j)] <= MIN_HINV_DIAG {
            return Err(Error::Numerical(format!(
                "layer `{layer}`: inverse Hessian diagonal at column {j} is {:e}; raise the damping fraction",
                u[(j, j)] * u[(j, j)]
            )));
        }
    }

    let block = match pattern {
        Pattern::NOfM { m, .. } => cfg.block_size.max(1).div_ceil(m) * m,
        Pattern::Unstructured { .. } => cfg.block_size.max(1),
    };
    // prune[i * cols + j] in permuted column space
    let mut prune = vec![false; rows * cols];
    let (row_quota, layer_quota) = match pattern {
        Pattern::Unstructured { ratio } => (
            cols - kept_count(ratio, cols),
            rows * cols - kept_count(ratio, rows * cols),
        ),
        Pattern::NOfM { .. } => (0, 0),
    };
    let mut pruned_in_row = vec![0usize; rows];
    let mut pruned_total = 0usize;

    // [H_F⁻¹]_qq for the unfrozen set F starting at `start`.
    let current_diag = |start: usize, q: usize| -> f64 {
        (start..=q).map(|i| u[(i, q)] * u[(i, q)]).sum()
    };

    for b0 in (0..cols).step_by(block) {
        let b1 = (b0 + block).min(cols);
        if let Pattern::Unstructured { .. } = pattern {
            let diag: Vec<f64> = (b0..cols).map(|q| current_diag(b0, q)).collect();
            let score = |i: usize, q: usize| cfg.saliency.apply(cur[(i, q)], diag[q - b0]);
            match cfg.group {
                Group::PerRow => {
                    for i in 0..rows {
                        let remaining = row_quota - pruned_in_row[i];
                        if remaining == 0 {
                            continue;
                        }
                        let cands: Vec<(f64, usize)> = (b0..cols).map(|q| (score(i, q), perm[q])).collect();
                        for k in lowest(&cands, remaining) {
                            let q = b0 + k;
                            if q < b1 {
                                prune[i * cols + q] = true;
                                pruned_in_row[i] += 1;
                            }
                        }
                    }
                }
                Group::PerLayer => {
                    let remaining = layer_quota - pruned_total;
                    if remaining > 0 {
                        let mut cands = Vec::with_capacity(rows * (cols - b0));
                        let mut coords = Vec::with_capacity(rows * (cols - b0));
                        for i in 0..rows {
                            for q in b0..cols {
                                cands.push((score(i, q), i * cols + perm[q]));
                                coords.push((i, q));
                            }
                        }
                        for k in lowest(&cands, remaining) {
                            let (i, q) = coords[k];
                            if q < b1 {
                                prune[i * cols + q] = true;
                                pruned_total += 1;
                            }
                        }
                    }
                }
            }
        }

        for j in b0..b1 {
            if let Pattern::NOfM { n, m } = pattern {
                if j % m == 0 && n < m {
                    let diag: Vec<f64> = (j..j + m).map(|q| current_diag(j, q)).collect();
                    for i in 0..rows {
                        let cands: Vec<(f64, usize)> = (j..j + m)
                            .map(|q| (cfg.saliency.apply(cur[(i, q)], diag[q - j]), perm[q]))
                            .collect();
                        for k in lowest(&cands, m - n) {
                            prune[i * cols + j + k] = true;
                        }
                    }
                }
            }
            let ujj = u[(j, j)];
            let u_row = &u.row(j)[j + 1..];
            for i in 0..rows {
                if !prune[i * cols + j] {
                    continue;
                }
                let err = cur[(i, j)] / ujj;
                let row = cur.row_mut(i);
                for (v, &uq) in row[j + 1..].iter_mut().zip(u_row) {
                    *v -= err * uq;
                }
                row[j] = 0.0;
            }
        }
    }

    let mut out = Matrix::zeros(rows, cols);
    let mut keep = vec![true; rows * cols];
    for i in 0..rows {
        for (p, &orig) in perm.iter().enumerate() {
            out[(i, orig)] = cur[(i, p)];
            keep[i * cols + orig] = !prune[i * cols + p];
        }
    }
    let mask = PruneMask {
        layer: layer.to_string(),
        rows,
        cols,
        keep,
        pattern,
        group: match pattern {
            Pattern::Unstructured { .. } => cfg.group,
            Pattern::NOfM { .. } => Group::PerRow,
        },
        column_permutation: permutation,
    };
    Ok((out, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsify::mask::{apply_mask, n_of_m_mask, unstructured_mask};

    #[test]
    fn identity_hessian_is_magnitude_pruning() {
        let w = Matrix::from_rows(&[[0.5, -2.0, 0.1, 1.5, -0.3, 0.7], [1.0, 0.2, -0.9, 0.05, 2.5, -1.1]]);
        let mag = w.map(|v| v * v);
        let cfg = ObsConfig {
            block_size: 2,
            ..ObsConfig::default()
        };
        let (out, mask) = obs_prune("l", &w, &Matrix::identity(6), Pattern::Unstructured { ratio: 0.5 }, None, &cfg).unwrap();
        let want = unstructured_mask("l", &mag, 0.5, Group::PerRow).unwrap();
        assert_eq!(mask.keep, want.keep);
        assert_eq!(out, apply_mask(&w, &want).unwrap());

        let w8 = Matrix::from_rows(&[[0.5, -2.0, 0.1, 1.5, -0.3, 0.7, 0.2, 0.9]]);
        let (out, mask) = obs_prune("l", &w8, &Matrix::identity(8), Pattern::NOfM { n: 2, m: 4 }, None, &cfg).unwrap();
        let want = n_of_m_mask("l", &w8.map(|v| v * v), 2, 4).unwrap();
        assert_eq!(mask.keep, want.keep);
        assert_eq!(out, apply_mask(&w8, &want).unwrap());
    }

    #[test]
    fn rejects_tiny_inverse_diagonal() {
        let w = Matrix::from_rows(&[[1.0, 1.0]]);
        let h_inv = Matrix::from_diag(&[1e-14, 1.0]);
        let err = obs_prune("l", &w, &h_inv, Pattern::Unstructured { ratio: 0.5 }, None, &ObsConfig::default())
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn per_layer_quota_is_exact() {
        let w = Matrix::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let cfg = ObsConfig {
            block_size: 4,
            group: Group::PerLayer,
            ..ObsConfig::default()
        };
        let (out, mask) = obs_prune("l", &w, &Matrix::identity(6), Pattern::Unstructured { ratio: 0.3 }, None, &cfg).unwrap();
        mask.validate().unwrap();
        assert_eq!(mask.kept(), kept_count(0.3, 24));
        for (v, k) in out.data().iter().zip(&mask.keep) {
            if !k {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
