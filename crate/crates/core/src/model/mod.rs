//! Minimal deterministic decoder-only transformer.
//!
//! Pre-norm blocks with parameter-free layer norm, causal multi-head attention,
//! a GELU MLP, learned positional embeddings and an unembedding tied to the
//! token embedding. Each block owns exactly six weight matrices, all of them
//! prunable; embeddings are never pruned.

mod container;
mod forward;
mod vocab;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use container::{container_bytes, read_container, write_container, ContainerHeader, TensorEntry, PBW_MAGIC};
pub use forward::{forward, layer_linear_inputs, valid_sites, ActivationTrace, ForwardOutput};
pub use vocab::{Token, Vocabulary, BOS_TOKEN, UNK_TOKEN};

use crate::error::{Error, FormatError, Result};
use crate::linalg::Matrix;

pub const TOK_EMBED: &str = "tok_embed.weight";
pub const POS_EMBED: &str = "pos_embed.weight";

pub const ATTN_PROJECTIONS: [&str; 4] = ["q_proj", "k_proj", "v_proj", "o_proj"];
pub const MLP_PROJECTIONS: [&str; 2] = ["fc1", "fc2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("model spec: {name} must be >= 1")));
            }
        }
        if self.max_seq_len < 8 {
            return Err(Error::invalid("model spec: max_seq_len must be >= 8"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "model spec: d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Prunable linear layer names in canonical order, e.g. `layer.0.attn.q_proj`.
    pub fn prunable_layers(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.n_layers * 6);
        for i in 0..self.n_layers {
            for p in ATTN_PROJECTIONS {
                out.push(format!("layer.{i}.attn.{p}"));
            }
            for p in MLP_PROJECTIONS {
                out.push(format!("layer.{i}.mlp.{p}"));
            }
        }
        out
    }

    /// `(out_features, in_features)` of a prunable layer.
    pub fn linear_shape(&self, layer: &str) -> Option<(usize, usize)> {
        let proj = layer.rsplit('.').next()?;
        let idx: usize = layer.strip_prefix("layer.")?.split('.').next()?.parse().ok()?;
        if idx >= self.n_layers {
            return None;
        }
        match proj {
            "q_proj" | "k_proj" | "v_proj" | "o_proj" if layer.contains(".attn.") => {
                Some((self.d_model, self.d_model))
            }
            "fc1" if layer.contains(".mlp.") => Some((self.d_ff, self.d_model)),
            "fc2" if layer.contains(".mlp.") => Some((self.d_model, self.d_ff)),
            _ => None,
        }
    }

    /// Every tensor name with its shape, in canonical file order.
    pub fn tensor_layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = vec![
            (TOK_EMBED.to_string(), (self.vocab_size, self.d_model)),
            (POS_EMBED.to_string(), (self.max_seq_len, self.d_model)),
        ];
        for layer in self.prunable_layers() {
            let shape = self.linear_shape(&layer).expect("canonical layer");
            out.push((weight_name(&layer), shape));
        }
        out
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

/// A model spec, its weights and its tokenizer. Immutable once built; tensors
/// are reference counted so derived bundles share untouched weights.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    spec: ModelSpec,
    tensors: BTreeMap<String, Arc<Matrix>>,
    vocab: Arc<Vocabulary>,
}

impl ModelBundle {
    pub fn new(spec: ModelSpec, tensors: BTreeMap<String, Matrix>, vocab: Vocabulary) -> Result<Self> {
        spec.validate()?;
        if vocab.len() != spec.vocab_size {
            return Err(Error::invalid(format!(
                "vocabulary has {} tokens but spec declares {}",
                vocab.len(),
                spec.vocab_size
            )));
        }
        let layout = spec.tensor_layout();
        for (name, shape) in &layout {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor `{name}`")))?;
            if t.shape() != *shape {
                return Err(FormatError::ShapeMismatch {
                    name: name.clone(),
                    header: t.shape(),
                    expected: *shape,
                }
                .into());
            }
            if !t.all_finite() {
                return Err(FormatError::NonFinite(name.clone()).into());
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !layout.iter().any(|(n, _)| n == *k)) {
            return Err(Error::invalid(format!("unknown tensor `{extra}`")));
        }
        Ok(Self {
            spec,
            tensors: tensors.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            vocab: Arc::new(vocab),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name).map(Arc::as_ref)
    }


    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Weight of a prunable layer, by layer name (`layer.0.mlp.fc1`).
    pub fn linear_weight(&self, layer: &str) -> Result<&Matrix> {
        self.tensor(&weight_name(layer))
            .ok_or_else(|| Error::invalid(format!("no prunable layer `{layer}`")))
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<Token>> {
        if max_len > self.spec.max_seq_len {
            return Err(Error::invalid(format!(
                "max_len {max_len} exceeds model max_seq_len {}",
                self.spec.max_seq_len
            )));
        }
        Ok(self.vocab.tokenize(text, max_len))
    }

    /// Returns a new bundle with some tensors replaced. Values are stored at
    /// `f32` precision so the in-memory bundle equals what a save/load cycle
    /// would produce.
    pub fn apply_weights(&self, replacements: BTreeMap<String, Matrix>) -> Result<ModelBundle> {
        let mut tensors = self.tensors.clone();
        for (name, m) in replacements {
            let current = tensors
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("cannot replace unknown tensor `{name}`")))?;
            if current.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "apply_weights",
                    left: current.shape(),
                    right: m.shape(),
                });
            }
            if !m.all_finite() {
                return Err(Error::invalid(format!("replacement for `{name}` has non-finite values")));
            }
            let rounded = m.map(|v| v as f32 as f64);
            tensors.insert(name, Arc::new(rounded));
        }
        Ok(ModelBundle {
            spec: self.spec,
            tensors,
            vocab: Arc::clone(&self.vocab),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors: Vec<(String, &Matrix)> = self
            .spec
            .tensor_layout()
            .into_iter()
            .map(|(name, _)| {
                let t = self.tensor(&name).expect("validated bundle");
                (name, t)
            })
            .collect();
        container::encode(Some(self.spec), Some(self.vocab.tokens().to_vec()), &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Container(source) => Error::Format {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors) = container::decode(bytes)?;
        let spec = header
            .spec
            .ok_or_else(|| FormatError::Header("weight container lacks a model spec".into()))?;
        spec.validate()?;
        let vocab = header
            .vocab
            .ok_or_else(|| FormatError::Header("weight container lacks a vocabulary".into()))?;
        let expected: BTreeMap<String, (usize, usize)> = spec.tensor_layout().into_iter().collect();
        for entry in &header.tensors {
            match expected.get(&entry.name) {
                None => {
                    return Err(FormatError::Header(format!("unknown tensor `{}`", entry.name)).into())
                }
                Some(&shape) if shape != (entry.rows, entry.cols) => {
                    return Err(FormatError::ShapeMismatch {
                        name: entry.name.clone(),
                        header: (entry.rows, entry.cols),
                        expected: shape,
                    }
                    .into())
                }
                _ => {}
            }
        }
        Self::new(spec, tensors, Vocabulary::new(vocab)?)
    }

    /// SHA-256 of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Loads a `.pbw` weight container.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    ModelBundle::load(path)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    bundle.save(path)
}
