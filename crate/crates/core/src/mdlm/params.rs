//! Flat parameter storage with a named tensor directory.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat buffer.
    pub offset: usize,
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub attn_norm: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub mlp_norm: Range<usize>,
    pub w1: Range<usize>,
    pub w2: Range<usize>,
}

/// Where every tensor lives in the flat buffer. Gradients and optimizer
/// moments share the same layout.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub tok_emb: Range<usize>,
    pub layers: Vec<LayerSlots>,
    pub final_norm: Range<usize>,
    pub lm_head: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.ffn_dim, cfg.vocab_size);
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let info = TensorInfo {
                name,
                shape,
                offset,
            };
            offset += info.numel();
            let r = info.range();
            tensors.push(info);
            r
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerSlots {
                attn_norm: push(format!("layers.{l}.attn_norm"), vec![d]),
                wq: push(format!("layers.{l}.wq"), vec![d, d]),
                wk: push(format!("layers.{l}.wk"), vec![d, d]),
                wv: push(format!("layers.{l}.wv"), vec![d, d]),
                wo: push(format!("layers.{l}.wo"), vec![d, d]),
                mlp_norm: push(format!("layers.{l}.mlp_norm"), vec![d]),
                w1: push(format!("layers.{l}.w1"), vec![d, f]),
                w2: push(format!("layers.{l}.w2"), vec![f, d]),
            })
            .collect();
        let final_norm = push("final_norm".into(), vec![d]);
        let lm_head = push("lm_head".into(), vec![d, v]);
        Layout {
            tensors,
            tok_emb,
            layers,
            final_norm,
            lm_head,
            total: offset,
        }
    }

    /// Checks a tensor directory read from disk against this layout.
    pub fn check(&self, dir: &[TensorInfo]) -> Result<()> {
        if dir != self.tensors.as_slice() {
            return Err(Error::Format(
                "tensor directory does not match the model configuration".into(),
            ));
        }
        Ok(())
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with("norm")
}

/// Deterministic initialisation: N(0, 0.02) for matrices, residual output
/// projections scaled by `1/sqrt(2 * n_layers)`, unit norm gains and a zero
/// output head (uniform initial predictions).
pub fn init_params(cfg: &ModelConfig, layout: &Layout, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f32; layout.total];
    let resid_scale = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
    for t in &layout.tensors {
        let slot = &mut out[t.range()];
        if is_gain(&t.name) {
            slot.fill(1.0);
        } else if t.name == "lm_head" {
            slot.fill(0.0);
        } else {
            let std = if t.name.ends_with(".wo") || t.name.ends_with(".w2") {
                0.02 * resid_scale
            } else {
                0.02
            };
            let normal = Normal::new(0.0f32, std).expect("positive std");
            slot.iter_mut().for_each(|p| *p = normal.sample(&mut rng));
        }
    }
    out
}

/// Whether weight decay applies to a tensor (matrices only).
pub fn decays(name: &str) -> bool {
    !is_gain(name)
}

/// SHA-256 over the little-endian bytes of a parameter buffer.
pub fn param_hash(params: &[f32]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    h.finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
