use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rope::{AttentionMode, RopeConfig, DEFAULT_ROTARY_BASE};

/// Version tag written into every JSON config and checkpoint header.
pub const SCHEMA_VERSION: u32 = 1;

/// Default seed for every seeded operation.
pub const DEFAULT_SEED: u64 = 2025;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    /// Next-token prediction under a lower-triangular attention mask.
    Causal,
    /// Masked-diffusion objective with full attention.
    BidirectionalMdlm,
}

impl ModelMode {
    pub fn attention(self) -> AttentionMode {
        match self {
            ModelMode::Causal => AttentionMode::Causal,
            ModelMode::BidirectionalMdlm => AttentionMode::Bidirectional,
        }
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::Causal => "causal",
            ModelMode::BidirectionalMdlm => "bidirectional_mdlm",
        })
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" | "ar" => Ok(ModelMode::Causal),
            "bidirectional_mdlm" | "mdlm" => Ok(ModelMode::BidirectionalMdlm),
            other => Err(Error::Parameter(format!(
                "unknown model mode `{other}` (expected causal|mdlm)"
            ))),
        }
    }
}

/// Token id layout shared by the corpus, the haystack generator and the
/// sampler. The last id is the MASK token; three ids at the bottom are
/// reserved markers; everything in between is ordinary content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub size: u32,
}

impl Vocab {
    pub const EOS: u32 = 0;
    pub const NEEDLE: u32 = 1;
    pub const QUERY: u32 = 2;
    pub const FIRST_CONTENT: u32 = 3;

    pub fn new(size: usize) -> Result<Self> {
        if size < Self::FIRST_CONTENT as usize + 3 {
            return Err(Error::Config(format!(
                "vocab_size {size} leaves fewer than 2 content tokens"
            )));
        }
        Ok(Vocab { size: size as u32 })
    }

    pub fn mask(&self) -> u32 {
        self.size - 1
    }

    /// Content token ids, `FIRST_CONTENT..mask`.
    pub fn content(&self) -> std::ops::Range<u32> {
        Self::FIRST_CONTENT..self.mask()
    }

    pub fn content_len(&self) -> usize {
        self.content().len()
    }

    /// Ids a model may emit (everything except MASK).
    pub fn predictable(&self) -> usize {
        self.size as usize - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Includes the MASK id, which is always `vocab_size - 1`.
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub rope: RopeConfig,
    pub mode: ModelMode,
    pub train_len: usize,
}

impl ModelConfig {
    /// The desk-scale default: 64 tokens + MASK, 2 layers, 2 heads of 32.
    pub fn toy(mode: ModelMode) -> Self {
        let train_len = 256;
        ModelConfig {
            schema_version: SCHEMA_VERSION,
            vocab_size: 65,
            n_layers: 2,
            d_model: 64,
            n_heads: 2,
            head_dim: 32,
            ffn_dim: 256,
            rope: RopeConfig {
                head_dim: 32,
                rotary_base: DEFAULT_ROTARY_BASE,
                train_len,
            },
            mode,
            train_len,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            size: self.vocab_size as u32,
        }
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab().mask()
    }

    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab_size)?;
        self.rope.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return bad(format!("head_dim must be even, got {}", self.head_dim));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad("n_layers, n_heads and ffn_dim must be positive".into());
        }
        if self.d_model != self.n_heads * self.head_dim {
            return bad(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if self.rope.head_dim != self.head_dim {
            return bad(format!(
                "rope.head_dim {} != head_dim {}",
                self.rope.head_dim, self.head_dim
            ));
        }
        if self.rope.train_len != self.train_len {
            return bad(format!(
                "rope.train_len {} != train_len {}",
                self.rope.train_len, self.train_len
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Remasking {
    /// Keep the most confident predictions each step.
    LowConfidence,
    /// Keep a random subset each step.
    Random,
}

impl FromStr for Remasking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_confidence" => Ok(Remasking::LowConfidence),
            "random" => Ok(Remasking::Random),
            other => Err(Error::Parameter(format!("unknown remasking `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub gen_len: usize,
    pub block_len: usize,
    pub steps: usize,
    pub remasking: Remasking,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            schema_version: SCHEMA_VERSION,
            gen_len: 32,
            block_len: 32,
            steps: 32,
            remasking: Remasking::LowConfidence,
            seed: DEFAULT_SEED,
        }
    }
}

impl SamplerConfig {
    pub fn with_steps(steps: usize) -> Self {
        SamplerConfig {
            steps,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gen_len == 0 || self.block_len == 0 {
            return Err(Error::Config("gen_len and block_len must be positive".into()));
        }
        if self.steps == 0 || self.steps > self.block_len {
            return Err(Error::Config(format!(
                "steps must be in 1..={} (block_len), got {}",
                self.block_len, self.steps
            )));
        }
        Ok(())
    }

    /// `gen_len` rounded up to a whole number of blocks.
    pub fn padded_len(&self) -> usize {
        self.gen_len.div_ceil(self.block_len) * self.block_len
    }

    /// Tokens finalised at each step within one block: an even split,
    /// earlier steps taking the remainder.
    pub fn schedule(&self) -> Vec<usize> {
        let base = self.block_len / self.steps;
        let extra = self.block_len % self.steps;
        (0..self.steps).map(|j| base + usize::from(j < extra)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f32,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "default_clip")]
    pub grad_clip: f32,
    /// Fraction of examples whose loss covers only the answer span after
    /// `[QUERY, key]` (when present).
    #[serde(default = "default_answer_only")]
    pub answer_only_frac: f32,
    /// Opening steps that draw only plain sequences (no `[QUERY, key]`).
    /// Copying is learned there first and then reused for retrieval.
    #[serde(default)]
    pub plain_warmup_steps: usize,
}

fn default_warmup() -> usize {
    100
}
fn default_weight_decay() -> f32 {
    0.01
}
fn default_clip() -> f32 {
    1.0
}
fn default_answer_only() -> f32 {
    0.5
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            batch: 64,
            steps: 3000,
            seed: DEFAULT_SEED,
            warmup: default_warmup(),
            weight_decay: default_weight_decay(),
            grad_clip: default_clip(),
            answer_only_frac: default_answer_only(),
            plain_warmup_steps: 800,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid() {
        for mode in [ModelMode::Causal, ModelMode::BidirectionalMdlm] {
            let c = ModelConfig::toy(mode);
            c.validate().unwrap();
            assert_eq!(c.mask_id(), 64);
            assert_eq!(c.vocab().predictable(), 64);
        }
    }

    #[test]
    fn config_errors() {
        let mut c = ModelConfig::toy(ModelMode::Causal);
        c.head_dim = 31;
        c.rope.head_dim = 31;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(ModelMode::Causal);
        c.d_model = 100;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(ModelMode::Causal);
        c.rope.train_len = 10;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(ModelMode::Causal);
        c.vocab_size = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule_is_even_split() {
        let s = |steps| SamplerConfig::with_steps(steps).schedule();
        assert_eq!(s(32), vec![1; 32]);
        assert_eq!(s(1), vec![32]);
        assert_eq!(s(4), vec![8; 4]);
        let mut sc = SamplerConfig::with_steps(5);
        sc.block_len = 12;
        assert_eq!(sc.schedule(), vec![3, 3, 2, 2, 2]);
        for steps in 1..=32 {
            assert_eq!(s(steps).iter().sum::<usize>(), 32);
        }
    }

    #[test]
    fn sampler_validation() {
        let mut sc = SamplerConfig::with_steps(33);
        assert!(sc.validate().is_err());
        sc.steps = 0;
        assert!(sc.validate().is_err());
        sc.steps = 8;
        sc.gen_len = 40;
        sc.validate().unwrap();
        assert_eq!(sc.padded_len(), 64);
    }

    #[test]
    fn mode_json_names() {
        assert_eq!(
            serde_json::to_string(&ModelMode::BidirectionalMdlm).unwrap(),
            "\"bidirectional_mdlm\""
        );
        assert_eq!("mdlm".parse::<ModelMode>().unwrap(), ModelMode::BidirectionalMdlm);
        assert!("diffusion".parse::<ModelMode>().is_err());
    }
}
