//! Input-channel permutation ahead of N:M masking.
//!
//! Columns are sorted by total saliency and dealt round-robin into groups of
//! `m`, then pairwise swaps between groups are applied greedily while they
//! raise the retained saliency (at most [`MAX_SWAPS`] swaps). The result is
//! only returned if it retains at least as much as the identity order.

use super::mask::{n_of_m_mask_permuted, PruneMask};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAX_SWAPS: usize = 1000;

/// Sum over rows of the `n` largest entries among `cols`.
fn group_score(metric: &Matrix, cols: &[usize], n: usize, buf: &mut Vec<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..metric.rows() {
        let row = metric.row(i);
        buf.clear();
        buf.extend(cols.iter().map(|&j| row[j]));
        buf.sort_by(|a, b| b.total_cmp(a));
        total += buf[..n].iter().sum::<f64>();
    }
    total
}

/// Retained saliency of the best N:M mask over a column order.
pub fn retained_with_permutation(metric: &Matrix, perm: &[usize], n: usize, m: usize) -> f64 {
    let mut buf = Vec::with_capacity(m);
    perm.chunks(m).map(|g| group_score(metric, g, n, &mut buf)).sum()
}

fn round_robin_start(metric: &Matrix, m: usize) -> Vec<Vec<usize>> {
    let cols = metric.cols();
    let mut totals = vec![0.0; cols];
    for i in 0..metric.rows() {
        for (t, v) in totals.iter_mut().zip(metric.row(i)) {
            *t += v;
        }
    }
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    let n_groups = cols / m;
    let mut groups = vec![Vec::with_capacity(m); n_groups];
    for (rank, &c) in order.iter().enumerate() {
        groups[rank % n_groups].push(c);
    }
    groups
}

fn hill_climb(metric: &Matrix, groups: &mut [Vec<usize>], n: usize, max_swaps: usize) -> usize {
    let cols = metric.cols();
    let mut buf = Vec::new();
    let mut scores: Vec<f64> = groups.iter().map(|g| group_score(metric, g, n, &mut buf)).collect();
    // position[c] = (group, slot) of column c
    let mut position = vec![(0usize, 0usize); cols];
    for (gi, g) in groups.iter().enumerate() {
        for (si, &c) in g.iter().enumerate() {
            position[c] = (gi, si);
        }
    }
    let mut swaps = 0;
    loop {
        let mut improved = false;
        for a in 0..cols {
            for b in a + 1..cols {
                let (ga, sa) = position[a];
                let (gb, sb) = position[b];
                if ga == gb {
                    continue;
                }
                groups[ga][sa] = b;
                groups[gb][sb] = a;
                let new_a = group_score(metric, &groups[ga], n, &mut buf);
                let new_b = group_score(metric, &groups[gb], n, &mut buf);
                let old = scores[ga] + scores[gb];
                let new = new_a + new_b;
                if new > old + 1e-12 * old.abs() {
                    scores[ga] = new_a;
                    scores[gb] = new_b;
                    position[a] = (gb, sb);
                    position[b] = (ga, sa);
                    swaps += 1;
                    improved = true;
                    if swaps >= max_swaps {
                        return swaps;
                    }
                } else {
                    groups[ga][sa] = a;
                    groups[gb][sb] = b;
                }
            }
        }
        if !improved {
            return swaps;
        }
    }
}

/// Finds a column permutation for N:M masking and the mask it induces.
pub fn channel_permutation(layer: &str, metric: &Matrix, n: usize, m: usize) -> Result<(Vec<usize>, PruneMask)> {
    if m == 0 || n > m {
        return Err(Error::invalid(format!("invalid N:M pattern {n}:{m}")));
    }
    let cols = metric.cols();
    if cols % m != 0 {
        return Err(Error::invalid(format!(
            "layer `{layer}`: {cols} columns not divisible by N:M group size {m}"
        )));
    }
    let identity: Vec<usize> = (0..cols).collect();
    let identity_mask = n_of_m_mask_permuted(layer, metric, n, m, None)?;
    if n == m || cols == m {
        return Ok((identity, identity_mask));
    }
    let mut groups = round_robin_start(metric, m);
    let swaps = hill_climb(metric, &mut groups, n, MAX_SWAPS);
    let perm: Vec<usize> = groups.concat();
    let mask = n_of_m_mask_permuted(layer, metric, n, m, Some(perm.clone()))?;
    let (gain, base) = (mask.retained_importance(metric), identity_mask.retained_importance(metric));
    log::debug!("{layer}: channel permutation after {swaps} swaps retains {gain} vs identity {base}");
    if gain >= base {
        Ok((perm, mask))
    } else {
        Ok((identity, identity_mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descending_row_example() {
        let m = Matrix::from_rows(&[[8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]]);
        let (perm, mask) = channel_permutation("l", &m, 2, 4).unwrap();
        mask.validate().unwrap();
        let identity = n_of_m_mask_permuted("l", &m, 2, 4, None).unwrap();
        assert_eq!(identity.retained_importance(&m), 22.0);
        assert!(mask.retained_importance(&m) >= 22.0);
        assert_eq!(mask.retained_importance(&m), 26.0);
        assert_eq!(perm.len(), 8);
    }

    #[test]
    fn uniform_columns_keep_identity_value() {
        let m = Matrix::from_fn(3, 8, |_, _| 1.0);
        let (_, mask) = channel_permutation("l", &m, 2, 4).unwrap();
        assert_eq!(mask.retained_importance(&m), 12.0);
    }

    #[test]
    fn errors() {
        assert!(channel_permutation("l", &Matrix::zeros(2, 6), 2, 4).is_err());
        assert!(channel_permutation("l", &Matrix::zeros(2, 8), 5, 4).is_err());
    }
}
