//! Calibration: sample token windows from a corpus, run them through the dense
//! model and accumulate per-layer input statistics.
//!
//! Stats keep only raw accumulators (`Σ x xᵀ` and `Σ x²`). Damping
//! `λ = damping_fraction × mean(diag Σ x xᵀ)` is applied when the Hessian is
//! read, so merging shards never double-damps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::framing;
use crate::linalg::Matrix;
use crate::model::{layer_linear_inputs, ModelBundle, Vocabulary};
use crate::util::{sha256_hex, substream_rng};

pub const DEFAULT_DAMPING_FRACTION: f64 = 0.01;
pub const DEFAULT_N_SAMPLES: usize = 128;
pub const DEFAULT_SEQ_LEN: usize = 128;

const STATS_MAGIC: &[u8; 8] = b"PBSTATS1";
/// Samples per accumulation shard. Fixed so the reduction tree, and therefore
/// every bit of the result, does not depend on the worker count.
const SHARD_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibConfig {
    pub corpus_path: PathBuf,
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub damping_fraction: f64,
}

impl CalibConfig {
    pub fn new(corpus_path: impl Into<PathBuf>) -> Self {
        Self {
            corpus_path: corpus_path.into(),
            n_samples: DEFAULT_N_SAMPLES,
            seq_len: DEFAULT_SEQ_LEN,
            seed: 0,
            damping_fraction: DEFAULT_DAMPING_FRACTION,
        }
    }

    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be >= 1"));
        }
        if self.seq_len < 8 || self.seq_len > max_seq_len {
            return Err(Error::invalid(format!(
                "seq_len {} outside [8, {max_seq_len}]",
                self.seq_len
            )));
        }
        if !(self.damping_fraction >= 0.0) || !self.damping_fraction.is_finite() {
            return Err(Error::invalid("damping_fraction must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// Reads a JSON-lines corpus with a `"text"` field per line.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    #[derive(Deserialize)]
    struct Line {
        text: String,
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(parsed.text);
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("corpus {} is empty", path.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibSample {
    /// Index of the corpus line the window came from.
    pub line: usize,
    /// Which `seq_len`-sized window of that line.
    pub window: usize,
    pub tokens: Vec<u32>,
}

/// Draws `n` windows: a line is picked uniformly at random, and successive
/// draws of the same line walk through its consecutive `seq_len` windows
/// (wrapping around), so the first draw of any line is its opening window.
pub fn sample_texts(
    vocab: &Vocabulary,
    lines: &[String],
    n: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<CalibSample>> {
    if seq_len == 0 {
        return Err(Error::invalid("seq_len must be positive"));
    }
    let tokenized: Vec<Vec<u32>> = lines.iter().map(|l| vocab.encode(l, usize::MAX)).collect();
    let candidates: Vec<usize> = (0..lines.len()).filter(|&i| !tokenized[i].is_empty()).collect();
    if candidates.is_empty() {
        return Err(Error::invalid("corpus has no tokenizable lines"));
    }
    let mut rng = substream_rng(seed, "calibration-sampling");
    let mut draws = vec![0usize; lines.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let line = candidates[rng.random_range(0..candidates.len())];
        let toks = &tokenized[line];
        let n_windows = toks.len().div_ceil(seq_len);
        let window = draws[line] % n_windows;
        draws[line] += 1;
        let start = window * seq_len;
        let end = (start + seq_len).min(toks.len());
        out.push(CalibSample {
            line,
            window,
            tokens: toks[start..end].to_vec(),
        });
    }
    Ok(out)
}

pub fn sample_calibration(
    vocab: &Vocabulary,
    corpus: &Path,
    n: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<CalibSample>> {
    sample_texts(vocab, &load_corpus(corpus)?, n, seq_len, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    /// `Σ_t x[t,j]²`.
    pub col_norm_sq: Vec<f64>,
    /// Raw `Σ_t x_t x_tᵀ`, undamped.
    pub gram: Matrix,
}

impl LayerStats {
    fn zeros(n: usize) -> Self {
        Self {
            col_norm_sq: vec![0.0; n],
            gram: Matrix::zeros(n, n),
        }
    }

    pub fn in_features(&self) -> usize {
        self.col_norm_sq.len()
    }

    /// Adds the rows of `x` to the upper triangle of the Gram matrix.
    fn add_upper(&mut self, x: &Matrix) {
        let n = self.in_features();
        let g = self.gram.data_mut();
        for t in 0..x.rows() {
            let row = x.row(t);
            for i in 0..n {
                let xi = row[i];
                if xi == 0.0 {
                    continue;
                }
                let g_row = &mut g[i * n..(i + 1) * n];
                for j in i..n {
                    g_row[j] += xi * row[j];
                }
            }
            for (s, v) in self.col_norm_sq.iter_mut().zip(row) {
                *s += v * v;
            }
        }
    }

    fn mirror_upper(&mut self) {
        let n = self.in_features();
        for i in 0..n {
            for j in 0..i {
                self.gram[(i, j)] = self.gram[(j, i)];
            }
        }
    }
}

/// Per-layer accumulated calibration statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibStats {
    layers: BTreeMap<String, LayerStats>,
    token_count: usize,
    damping_fraction: f64,
    fingerprint: String,
}

impl CalibStats {
    pub fn layer(&self, name: &str) -> Result<&LayerStats> {
        self.layers
            .get(name)
            .ok_or_else(|| Error::invalid(format!("calibration stats have no layer `{name}`")))
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn damping_fraction(&self) -> f64 {
        self.damping_fraction
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Rebinds the fingerprint, e.g. to the hash of the calibration config and
    /// corpus that produced these stats.
    pub fn set_fingerprint(&mut self, fingerprint: impl Into<String>) {
        self.fingerprint = fingerprint.into();
    }

    /// Stats with the same layers and fingerprint but no tokens.
    pub fn empty_like(other: &CalibStats) -> CalibStats {
        CalibStats {
            layers: other
                .layers
                .iter()
                .map(|(k, v)| (k.clone(), LayerStats::zeros(v.in_features())))
                .collect(),
            token_count: 0,
            damping_fraction: other.damping_fraction,
            fingerprint: other.fingerprint.clone(),
        }
    }

    /// Builds stats directly from per-layer input matrices. Mainly for tests
    /// and synthetic experiments.
    pub fn from_inputs(
        inputs: &BTreeMap<String, Matrix>,
        damping_fraction: f64,
        fingerprint: impl Into<String>,
    ) -> Result<CalibStats> {
        let mut layers = BTreeMap::new();
        let mut token_count = None;
        for (name, x) in inputs {
            match token_count {
                None => token_count = Some(x.rows()),
                Some(n) if n != x.rows() => {
                    return Err(Error::invalid("all layer inputs must have the same token count"))
                }
                _ => {}
            }
            let mut s = LayerStats::zeros(x.cols());
            s.add_upper(x);
            s.mirror_upper();
            layers.insert(name.clone(), s);
        }
        Ok(CalibStats {
            layers,
            token_count: token_count.unwrap_or(0),
            damping_fraction,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn col_norms(&self, layer: &str) -> Result<Vec<f64>> {
        Ok(self.layer(layer)?.col_norm_sq.iter().map(|v| v.sqrt()).collect())
    }

    /// `λ = damping_fraction × mean(diag of the raw Gram)`.
    pub fn damping_lambda(&self, layer: &str) -> Result<f64> {
        let s = self.layer(layer)?;
        let n = s.in_features() as f64;
        let mean_diag = s.gram.diag().iter().sum::<f64>() / n;
        Ok(self.damping_fraction * mean_diag)
    }

    /// `Σ x xᵀ + λI`.
    pub fn damped_gram(&self, layer: &str) -> Result<Matrix> {
        if self.token_count == 0 {
            return Err(Error::invalid("calibration stats hold no tokens"));
        }
        let lambda = self.damping_lambda(layer)?;
        let mut h = self.layer(layer)?.gram.clone();
        for i in 0..h.rows() {
            h[(i, i)] += lambda;
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_file(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<CalibStats> {
        let bytes = crate::util::read_file(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Container(source) => Error::Format {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = StatsHeader {
            format_version: 1,
            token_count: self.token_count,
            damping_fraction: self.damping_fraction,
            fingerprint: self.fingerprint.clone(),
            layers: self
                .layers
                .iter()
                .map(|(name, s)| StatsLayerEntry {
                    name: name.clone(),
                    in_features: s.in_features(),
                })
                .collect(),
        };
        let mut payload = Vec::new();
        for s in self.layers.values() {
            framing::f64s_to_bytes(&s.col_norm_sq, &mut payload);
            framing::f64s_to_bytes(s.gram.data(), &mut payload);
        }
        let header = serde_json::to_vec(&header).expect("stats header serializes");
        framing::encode(STATS_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CalibStats> {
        let (header, payload) = framing::decode(STATS_MAGIC, bytes)?;
        let header: StatsHeader =
            serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()))?;
        let needed: usize = header
            .layers
            .iter()
            .map(|l| 8 * (l.in_features + l.in_features * l.in_features))
            .sum();
        if payload.len() != needed {
            return Err(FormatError::Truncated {
                needed,
                available: payload.len(),
            }
            .into());
        }
        let values = framing::bytes_to_f64s(payload);
        let mut at = 0;
        let mut layers = BTreeMap::new();
        for l in header.layers {
            let n = l.in_features;
            let col_norm_sq = values[at..at + n].to_vec();
            at += n;
            let gram = Matrix::new(n, n, values[at..at + n * n].to_vec())?;
            at += n * n;
            if !gram.all_finite() || col_norm_sq.iter().any(|v| !v.is_finite()) {
                return Err(FormatError::NonFinite(l.name).into());
            }
            layers.insert(l.name, LayerStats { col_norm_sq, gram });
        }
        Ok(CalibStats {
            layers,
            token_count: header.token_count,
            damping_fraction: header.damping_fraction,
            fingerprint: header.fingerprint,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StatsHeader {
    format_version: u32,
    token_count: usize,
    damping_fraction: f64,
    fingerprint: String,
    layers: Vec<StatsLayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct StatsLayerEntry {
    name: String,
    in_features: usize,
}

/// Entrywise sum of raw accumulators. Both inputs must describe the same
/// layers, shapes, damping fraction and fingerprint.
pub fn merge_stats(a: &CalibStats, b: &CalibStats) -> Result<CalibStats> {
    if a.fingerprint != b.fingerprint {
        return Err(Error::invalid(format!(
            "cannot merge stats with different fingerprints ({} vs {})",
            a.fingerprint, b.fingerprint
        )));
    }
    if a.damping_fraction.to_bits() != b.damping_fraction.to_bits() {
        return Err(Error::invalid("cannot merge stats with different damping fractions"));
    }
    if a.layers.len() != b.layers.len() {
        return Err(Error::invalid("cannot merge stats over different layer sets"));
    }
    let mut layers = BTreeMap::new();
    for ((na, sa), (nb, sb)) in a.layers.iter().zip(&b.layers) {
        if na != nb || sa.in_features() != sb.in_features() {
            return Err(Error::invalid(format!(
                "cannot merge stats: layer `{na}` ({}) vs `{nb}` ({})",
                sa.in_features(),
                sb.in_features()
            )));
        }
        let col_norm_sq = sa.col_norm_sq.iter().zip(&sb.col_norm_sq).map(|(x, y)| x + y).collect();
        let data = sa.gram.data().iter().zip(sb.gram.data()).map(|(x, y)| x + y).collect();
        let n = sa.in_features();
        layers.insert(
            na.clone(),
            LayerStats {
                col_norm_sq,
                gram: Matrix::new(n, n, data)?,
            },
        );
    }
    Ok(CalibStats {
        layers,
        token_count: a.token_count + b.token_count,
        damping_fraction: a.damping_fraction,
        fingerprint: a.fingerprint.clone(),
    })
}

/// Fingerprint of stats accumulated from `bundle` with a given damping
/// fraction; independent of which samples went in, so shards merge.
pub fn base_fingerprint(bundle: &ModelBundle, damping_fraction: f64) -> String {
    let mut bytes = bundle.fingerprint().into_bytes();
    bytes.extend_from_slice(&damping_fraction.to_le_bytes());
    sha256_hex(&bytes)
}

fn accumulate_shard(
    bundle: &ModelBundle,
    samples: &[&[u32]],
    template: &CalibStats,
) -> Result<CalibStats> {
    let mut stats = CalibStats::empty_like(template);
    for tokens in samples {
        if tokens.is_empty() {
            continue;
        }
        let inputs = layer_linear_inputs(bundle, tokens)?;
        for (name, x) in &inputs {
            stats
                .layers
                .get_mut(name)
                .expect("layer present")
                .add_upper(x);
        }
        stats.token_count += tokens.len();
    }
    for s in stats.layers.values_mut() {
        s.mirror_upper();
    }
    Ok(stats)
}

fn tree_merge(mut parts: Vec<CalibStats>) -> Result<CalibStats> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge_stats(&a, &b)?),
                None => next.push(a),
            }
        }
        parts = next;
    }
    Ok(parts.pop().expect("at least one part"))
}

/// Runs every sample through the dense model and accumulates per-layer input
/// statistics. Samples are put in canonical order and reduced through a fixed
/// shard tree, so the result is bit-identical for any sample order and any
/// number of worker threads.
pub fn accumulate_stats(
    bundle: &ModelBundle,
    samples: &[Vec<u32>],
    damping_fraction: f64,
) -> Result<CalibStats> {
    if samples.is_empty() {
        return Err(Error::invalid("no calibration samples"));
    }
    if samples.iter().all(Vec::is_empty) {
        return Err(Error::invalid("calibration samples contain zero tokens"));
    }
    let spec = bundle.spec();
    let template = CalibStats {
        layers: spec
            .prunable_layers()
            .into_iter()
            .map(|l| {
                let (_, inf) = spec.linear_shape(&l).expect("canonical layer");
                (l, LayerStats::zeros(inf))
            })
            .collect(),
        token_count: 0,
        damping_fraction,
        fingerprint: base_fingerprint(bundle, damping_fraction),
    };
    let mut ordered: Vec<&[u32]> = samples.iter().map(Vec::as_slice).collect();
    ordered.sort();
    let shards: Vec<CalibStats> = ordered
        .par_chunks(SHARD_SIZE)
        .map(|chunk| accumulate_shard(bundle, chunk, &template))
        .collect::<Result<_>>()?;
    tree_merge(shards)
}
