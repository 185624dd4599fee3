//! Whole-model pruning: one independent task per prunable linear layer.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mask::{apply_mask, n_of_m_mask_permuted, unstructured_mask, Group, Pattern, PruneMask};
use super::obs::{obs_prune, ObsConfig, DEFAULT_BLOCK_SIZE};
use super::permute::channel_permutation;
use crate::calib::CalibStats;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{compute_metric, Method, MetricConfig};
use crate::model::{weight_name, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub metric: MetricConfig,
    pub pattern: Pattern,
    /// Search a channel permutation before N:M masking.
    pub permute: bool,
    pub group: Group,
    pub block_size: usize,
    /// Record per-layer wall time in the summary. Off by default so that
    /// summaries are reproducible byte for byte.
    pub record_timings: bool,
}

impl PruneConfig {
    pub fn new(method: Method, pattern: Pattern) -> Self {
        Self {
            metric: MetricConfig::new(method),
            pattern,
            permute: false,
            group: Group::PerRow,
            block_size: DEFAULT_BLOCK_SIZE,
            record_timings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        self.pattern.validate()?;
        if self.permute && !matches!(self.pattern, Pattern::NOfM { .. }) {
            return Err(Error::invalid("channel permutation requires an N:M pattern"));
        }
        if self.block_size == 0 {
            return Err(Error::invalid("OBS block size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    pub kept: usize,
    pub sparsity: f64,
    /// Sum of the metric over kept entries, relative to the metric total.
    pub retained_importance: f64,
    pub retained_fraction: f64,
    pub column_permutation: Option<Vec<usize>>,
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub config: PruneConfig,
    pub layers: Vec<LayerSummary>,
    pub total_params: usize,
    pub total_kept: usize,
    pub overall_sparsity: f64,
}

#[derive(Debug, Clone)]
pub struct PruneOutput {
    pub bundle: ModelBundle,
    pub masks: Vec<PruneMask>,
    pub summary: PruneSummary,
    /// Saliency matrices per layer, kept only when requested.
    pub metrics: Option<BTreeMap<String, Matrix>>,
}

pub struct LayerResult {
    pub weight: Matrix,
    pub mask: PruneMask,
    pub metric: Matrix,
    pub summary: LayerSummary,
}

/// Prunes a single layer. `w` is the dense weight, stats are looked up by name.
pub fn prune_layer(layer: &str, w: &Matrix, stats: &CalibStats, cfg: &PruneConfig) -> Result<LayerResult> {
    let start = Instant::now();
    let (metric, h_inv) = compute_metric(w, stats, layer, &cfg.metric)?;
    let permutation = match (cfg.permute, cfg.pattern) {
        (true, Pattern::NOfM { n, m }) => Some(channel_permutation(layer, &metric, n, m)?.0),
        _ => None,
    };
    let (weight, mask) = match h_inv {
        Some(h_inv) => {
            let obs = ObsConfig {
                block_size: cfg.block_size,
                saliency: cfg.metric.sparsegpt_saliency,
                group: cfg.group,
            };
            obs_prune(layer, w, &h_inv, cfg.pattern, permutation, &obs)?
        }
        None => {
            let mask = match cfg.pattern {
                Pattern::Unstructured { ratio } => unstructured_mask(layer, &metric, ratio, cfg.group)?,
                Pattern::NOfM { n, m } => n_of_m_mask_permuted(layer, &metric, n, m, permutation)?,
            };
            (apply_mask(w, &mask)?, mask)
        }
    };
    mask.validate()?;
    if !weight.all_finite() {
        return Err(Error::Numerical(format!("layer `{layer}`: pruned weights are not finite")));
    }
    let retained = mask.retained_importance(&metric);
    let total: f64 = metric.data().iter().sum();
    let summary = LayerSummary {
        layer: layer.to_string(),
        rows: mask.rows,
        cols: mask.cols,
        kept: mask.kept(),
        sparsity: mask.sparsity(),
        retained_importance: retained,
        retained_fraction: if total > 0.0 { retained / total } else { 1.0 },
        column_permutation: mask.column_permutation.clone(),
        wall_time_ms: cfg.record_timings.then(|| start.elapsed().as_secs_f64() * 1e3),
    };
    Ok(LayerResult {
        weight,
        mask,
        metric,
        summary,
    })
}

/// Prunes every prunable layer of `bundle`. Layers run in parallel on the
/// current rayon pool; results are assembled in canonical layer order.
pub fn prune_model(bundle: &ModelBundle, stats: &CalibStats, cfg: &PruneConfig, keep_metrics: bool) -> Result<PruneOutput> {
    cfg.validate()?;
    let layers = bundle.spec().prunable_layers();
    for layer in &layers {
        stats.layer(layer)?;
    }
    let results: Vec<LayerResult> = layers
        .par_iter()
        .map(|layer| prune_layer(layer, bundle.linear_weight(layer)?, stats, cfg))
        .collect::<Result<_>>()?;

    let mut replacements = BTreeMap::new();
    let mut masks = Vec::with_capacity(results.len());
    let mut summaries = Vec::with_capacity(results.len());
    let mut metrics = keep_metrics.then(BTreeMap::new);
    for r in results {
        replacements.insert(weight_name(&r.summary.layer), r.weight);
        if let Some(m) = metrics.as_mut() {
            m.insert(r.summary.layer.clone(), r.metric);
        }
        masks.push(r.mask);
        summaries.push(r.summary);
    }
    let pruned = bundle.apply_weights(replacements)?;
    let total_params: usize = summaries.iter().map(|s| s.rows * s.cols).sum();
    let total_kept: usize = summaries.iter().map(|s| s.kept).sum();
    let summary = PruneSummary {
        config: *cfg,
        layers: summaries,
        total_params,
        total_kept,
        overall_sparsity: if total_params == 0 {
            0.0
        } else {
            1.0 - total_kept as f64 / total_params as f64
        },
    };
    log::info!(
        "pruned {} layers with {} ({}): overall sparsity {:.4}",
        summary.layers.len(),
        cfg.metric.method,
        cfg.pattern,
        summary.overall_sparsity
    );
    Ok(PruneOutput {
        bundle: pruned,
        masks,
        summary,
        metrics,
    })
}
