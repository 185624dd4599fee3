use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::framing;
use crate::linalg::Matrix;

const MASK_MAGIC: &[u8; 8] = b"PBMASK01";

/// Target sparsity pattern of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Unstructured { ratio: f64 },
    NOfM { n: usize, m: usize },
}

impl Pattern {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Pattern::Unstructured { ratio } if !(0.0..=1.0).contains(&ratio) => Err(Error::invalid(
                format!("sparsity ratio {ratio} outside [0, 1]"),
            )),
            Pattern::NOfM { n, m } if m == 0 || n > m => {
                Err(Error::invalid(format!("invalid N:M pattern {n}:{m}")))
            }
            _ => Ok(()),
        }
    }

    /// Fraction of weights this pattern removes.
    pub fn nominal_sparsity(&self) -> f64 {
        match *self {
            Pattern::Unstructured { ratio } => ratio,
            Pattern::NOfM { n, m } => 1.0 - n as f64 / m as f64,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Unstructured { ratio } => write!(f, "{ratio}"),
            Pattern::NOfM { n, m } => write!(f, "{n}:{m}"),
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    /// `"0.5"` for unstructured, `"2:4"` for N:M.
    fn from_str(s: &str) -> Result<Self> {
        let p = if let Some((n, m)) = s.split_once(':') {
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad N:M pattern `{s}`")))
            };
            Pattern::NOfM {
                n: parse(n)?,
                m: parse(m)?,
            }
        } else {
            let ratio = s
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad sparsity `{s}`")))?;
            Pattern::Unstructured { ratio }
        };
        p.validate()?;
        Ok(p)
    }
}

/// Set of weights ranked against each other for unstructured selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    #[default]
    PerRow,
    PerLayer,
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-row" | "per_row" | "row" => Ok(Group::PerRow),
            "per-layer" | "per_layer" | "layer" => Ok(Group::PerLayer),
            _ => Err(Error::invalid(format!("unknown comparison group `{s}`"))),
        }
    }
}

/// Number of entries kept out of `n` at a given unstructured ratio.
pub fn kept_count(ratio: f64, n: usize) -> usize {
    (((1.0 - ratio) * n as f64).round() as usize).min(n)
}

/// Ranking shared by every selection: higher metric first, and among equal
/// metrics the lower index first. Kept entries are a prefix of this order.
#[inline]
pub(crate) fn rank_desc(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Binary keep/drop mask of one layer. `keep` is stored in the layer's own
/// column order; when a column permutation is present, N:M groups are formed
/// over the permuted order (`column_permutation[p]` is the original column at
/// permuted position `p`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<bool>,
    pub pattern: Pattern,
    #[serde(default)]
    pub group: Group,
    pub column_permutation: Option<Vec<usize>>,
}

impl PruneMask {
    pub fn all_ones(layer: &str, rows: usize, cols: usize, pattern: Pattern) -> Self {
        Self {
            layer: layer.to_string(),
            rows,
            cols,
            keep: vec![true; rows * cols],
            pattern,
            group: Group::PerRow,
            column_permutation: None,
        }
    }

    #[inline]
    pub fn keeps(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        1.0 - self.kept() as f64 / self.keep.len() as f64
    }

    /// Sum of metric entries over kept weights, summed in row-major order.
    pub fn retained_importance(&self, metric: &Matrix) -> f64 {
        metric
            .data()
            .iter()
            .zip(&self.keep)
            .filter(|(_, &k)| k)
            .map(|(v, _)| v)
            .sum()
    }

    pub fn permutation_or_identity(&self) -> Vec<usize> {
        self.column_permutation
            .clone()
            .unwrap_or_else(|| (0..self.cols).collect())
    }

    /// Checks every structural invariant of the declared pattern.
    pub fn validate(&self) -> Result<()> {
        if self.keep.len() != self.rows * self.cols {
            return Err(Error::Invariant(format!(
                "mask `{}`: keep length {} != {}x{}",
                self.layer,
                self.keep.len(),
                self.rows,
                self.cols
            )));
        }
        if let Some(perm) = &self.column_permutation {
            validate_permutation(perm, self.cols)?;
        }
        match self.pattern {
            Pattern::Unstructured { ratio } => match self.group {
                Group::PerRow => {
                    let want = kept_count(ratio, self.cols);
                    for i in 0..self.rows {
                        let got = (0..self.cols).filter(|&j| self.keeps(i, j)).count();
                        if got != want {
                            return Err(Error::Invariant(format!(
                                "mask `{}` row {i}: kept {got}, expected {want}",
                                self.layer
                            )));
                        }
                    }
                }
                Group::PerLayer => {
                    let want = kept_count(ratio, self.keep.len());
                    if self.kept() != want {
                        return Err(Error::Invariant(format!(
                            "mask `{}`: kept {}, expected {want}",
                            self.layer,
                            self.kept()
                        )));
                    }
                }
            },
            Pattern::NOfM { n, m } => {
                if self.cols % m != 0 {
                    return Err(Error::Invariant(format!(
                        "mask `{}`: {} columns not divisible by {m}",
                        self.layer, self.cols
                    )));
                }
                let perm = self.permutation_or_identity();
                for i in 0..self.rows {
                    for g in perm.chunks(m) {
                        let kept = g.iter().filter(|&&j| self.keeps(i, j)).count();
                        if kept > n {
                            return Err(Error::Invariant(format!(
                                "mask `{}` row {i}: group keeps {kept} > {n}",
                                self.layer
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = MaskHeader {
            format_version: 1,
            layer: self.layer.clone(),
            rows: self.rows,
            cols: self.cols,
            pattern: self.pattern,
            group: self.group,
            column_permutation: self.column_permutation.clone(),
        };
        let mut payload = vec![0u8; self.keep.len().div_ceil(8)];
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                payload[i / 8] |= 1 << (i % 8);
            }
        }
        let header = serde_json::to_vec(&header).expect("mask header serializes");
        framing::encode(MASK_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PruneMask> {
        let (header, payload) = framing::decode(MASK_MAGIC, bytes)?;
        let h: MaskHeader =
            serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;
        let n = h.rows * h.cols;
        if payload.len() != n.div_ceil(8) {
            return Err(FormatError::Truncated {
                needed: n.div_ceil(8),
                available: payload.len(),
            }
            .into());
        }
        let keep = (0..n).map(|i| payload[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(PruneMask {
            layer: h.layer,
            rows: h.rows,
            cols: h.cols,
            keep,
            pattern: h.pattern,
            group: h.group,
            column_permutation: h.column_permutation,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_file(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<PruneMask> {
        let bytes = crate::util::read_file(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Container(source) => Error::Format {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskHeader {
    format_version: u32,
    layer: String,
    rows: usize,
    cols: usize,
    pattern: Pattern,
    group: Group,
    column_permutation: Option<Vec<usize>>,
}

pub(crate) fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Invariant(format!(
            "permutation has length {} but layer has {n} columns",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Invariant("column permutation is not a bijection".into()));
        }
    }
    Ok(())
}

fn keep_top_k(values: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| rank_desc((values[a], a), (values[b], b)));
    let mut keep = vec![false; values.len()];
    for &j in order.iter().take(k) {
        keep[j] = true;
    }
    keep
}

/// Keeps the top `round((1 - ratio) · n)` entries of each comparison group;
/// ties go to the lower column (or flat) index.
pub fn unstructured_mask(layer: &str, metric: &Matrix, ratio: f64, group: Group) -> Result<PruneMask> {
    let pattern = Pattern::Unstructured { ratio };
    pattern.validate()?;
    let (rows, cols) = metric.shape();
    let keep = match group {
        Group::PerRow => {
            let k = kept_count(ratio, cols);
            (0..rows).flat_map(|i| keep_top_k(metric.row(i), k)).collect()
        }
        Group::PerLayer => keep_top_k(metric.data(), kept_count(ratio, rows * cols)),
    };
    Ok(PruneMask {
        layer: layer.to_string(),
        rows,
        cols,
        keep,
        pattern,
        group,
        column_permutation: None,
    })
}

/// N:M mask over groups of `m` consecutive columns of the permuted order.
pub fn n_of_m_mask_permuted(
    layer: &str,
    metric: &Matrix,
    n: usize,
    m: usize,
    permutation: Option<Vec<usize>>,
) -> Result<PruneMask> {
    let pattern = Pattern::NOfM { n, m };
    pattern.validate()?;
    let (rows, cols) = metric.shape();
    if cols % m != 0 {
        return Err(Error::invalid(format!(
            "layer `{layer}`: {cols} columns not divisible by N:M group size {m}"
        )));
    }
    let perm = match &permutation {
        Some(p) => {
            validate_permutation(p, cols).map_err(|e| Error::invalid(e.to_string()))?;
            p.clone()
        }
        None => (0..cols).collect(),
    };
    let mut keep = vec![false; rows * cols];
    for i in 0..rows {
        let row = metric.row(i);
        for group in perm.chunks(m) {
            let vals: Vec<f64> = group.iter().map(|&j| row[j]).collect();
            for (slot, k) in keep_top_k(&vals, n).into_iter().enumerate() {
                keep[i * cols + group[slot]] = k;
            }
        }
    }
    Ok(PruneMask {
        layer: layer.to_string(),
        rows,
        cols,
        keep,
        pattern,
        group: Group::PerRow,
        column_permutation: permutation,
    })
}

pub fn n_of_m_mask(layer: &str, metric: &Matrix, n: usize, m: usize) -> Result<PruneMask> {
    n_of_m_mask_permuted(layer, metric, n, m, None)
}

/// Zeroes dropped weights. Kept entries are copied bit-for-bit, and the mask's
/// column order is the weight's own, so the layer computes the same function
/// on unpermuted inputs.
pub fn apply_mask(w: &Matrix, mask: &PruneMask) -> Result<Matrix> {
    if w.shape() != (mask.rows, mask.cols) {
        return Err(Error::Shape {
            op: "apply_mask",
            left: w.shape(),
            right: (mask.rows, mask.cols),
        });
    }
    let data = w
        .data()
        .iter()
        .zip(&mask.keep)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    Matrix::new(mask.rows, mask.cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_extremes() {
        let m = Matrix::from_rows(&[[5.0, 1.0, 3.0, 2.0], [0.0, 0.0, 0.0, 0.0]]);
        assert!(unstructured_mask("l", &m, 0.0, Group::PerRow).unwrap().keep.iter().all(|&k| k));
        assert!(unstructured_mask("l", &m, 1.0, Group::PerRow).unwrap().keep.iter().all(|&k| !k));
        assert!(unstructured_mask("l", &m, 1.5, Group::PerRow).is_err());
    }

    #[test]
    fn top_half_and_ties() {
        let m = Matrix::from_rows(&[[5.0, 1.0, 3.0, 2.0], [1.0, 1.0, 1.0, 1.0]]);
        let mask = unstructured_mask("l", &m, 0.5, Group::PerRow).unwrap();
        assert_eq!(&mask.keep[..4], &[true, false, true, false]);
        assert_eq!(&mask.keep[4..], &[true, true, false, false]);
        mask.validate().unwrap();
    }

    #[test]
    fn per_layer_group() {
        let m = Matrix::from_rows(&[[5.0, 4.0], [1.0, 0.5]]);
        let mask = unstructured_mask("l", &m, 0.5, Group::PerLayer).unwrap();
        assert_eq!(mask.keep, vec![true, true, false, false]);
        mask.validate().unwrap();
    }

    #[test]
    fn two_four_single_group() {
        let m = Matrix::from_rows(&[[4.0, 1.0, 3.0, 2.0]]);
        let mask = n_of_m_mask("l", &m, 2, 4).unwrap();
        assert_eq!(mask.keep, vec![true, false, true, false]);
        let full = n_of_m_mask("l", &m, 4, 4).unwrap();
        assert!(full.keep.iter().all(|&k| k));
        assert!(n_of_m_mask("l", &Matrix::zeros(1, 6), 2, 4).is_err());
    }

    #[test]
    fn apply_mask_exactness() {
        let w = Matrix::from_rows(&[[0.1, -0.2], [0.3, 0.4]]);
        let ones = PruneMask::all_ones("l", 2, 2, Pattern::Unstructured { ratio: 0.0 });
        assert_eq!(apply_mask(&w, &ones).unwrap(), w);
        let mut zeros = ones.clone();
        zeros.keep = vec![false; 4];
        assert_eq!(apply_mask(&w, &zeros).unwrap(), Matrix::zeros(2, 2));
        let mut half = ones.clone();
        half.keep = vec![true, false, false, true];
        let out = apply_mask(&w, &half).unwrap();
        assert_eq!(out.data(), &[0.1, 0.0, 0.0, 0.4]);
        assert!(apply_mask(&Matrix::zeros(3, 2), &half).is_err());
    }

    #[test]
    fn mask_file_round_trip() {
        let m = Matrix::from_rows(&[[4.0, 1.0, 3.0, 2.0, 9.0, 0.0, 1.0, 1.0]]);
        let mask = n_of_m_mask_permuted("layer.0.mlp.fc1", &m, 2, 4, Some(vec![7, 6, 5, 4, 3, 2, 1, 0]))
            .unwrap();
        mask.validate().unwrap();
        let back = PruneMask::from_bytes(&mask.to_bytes()).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!("2:4".parse::<Pattern>().unwrap(), Pattern::NOfM { n: 2, m: 4 });
        assert_eq!("0.5".parse::<Pattern>().unwrap(), Pattern::Unstructured { ratio: 0.5 });
        assert!("5:4".parse::<Pattern>().is_err());
        assert!("1.2".parse::<Pattern>().is_err());
        assert_eq!(Pattern::NOfM { n: 2, m: 4 }.to_string(), "2:4");
    }

    #[test]
    fn validate_catches_bad_masks() {
        let mut mask = PruneMask::all_ones("l", 1, 4, Pattern::NOfM { n: 2, m: 4 });
        assert!(mask.validate().is_err());
        mask.keep = vec![true, true, false, false];
        mask.column_permutation = Some(vec![0, 0, 1, 2]);
        assert!(mask.validate().is_err());
    }
}
