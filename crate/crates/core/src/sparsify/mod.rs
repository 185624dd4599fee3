//! Masks, channel permutation, OBS compensation and whole-model pruning.

pub mod mask;
pub mod obs;
pub mod permute;
pub mod prune;

pub use mask::{apply_mask, kept_count, n_of_m_mask, n_of_m_mask_permuted, unstructured_mask, Group, Pattern, PruneMask};
pub use obs::{obs_prune, ObsConfig, DEFAULT_BLOCK_SIZE};
pub use permute::{channel_permutation, retained_with_permutation, MAX_SWAPS};
pub use prune::{prune_layer, prune_model, LayerResult, LayerSummary, PruneConfig, PruneOutput, PruneSummary};
