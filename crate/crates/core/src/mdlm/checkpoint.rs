//! Single-file checkpoint container.
//!
//! ```text
//! "RHZN" | version: u32 LE | header_len: u64 LE | header JSON | f32 LE payload
//! ```
//!
//! The JSON header carries the model config, training metadata and a tensor
//! directory whose `offset` fields are byte offsets from the start of the
//! payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Transformer;
use super::params::{init_params, param_hash, Layout, TensorInfo};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RHZN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    train_meta: TrainMeta,
    tensors: Vec<TensorInfo>,
}

/// Model parameters plus everything needed to rebuild the model.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Vec<f32>,
    pub train_meta: TrainMeta,
    layout: Layout,
}

impl PartialEq for ModelCheckpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.train_meta == other.train_meta
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Deterministic parameter initialisation.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
    config.validate()?;
    let layout = Layout::new(&config);
    let params = init_params(&config, &layout, seed);
    Ok(ModelCheckpoint {
        config,
        params,
        train_meta: TrainMeta {
            steps: 0,
            final_loss: 0.0,
            seed,
        },
        layout,
    })
}

impl ModelCheckpoint {
    pub fn from_parts(config: ModelConfig, params: Vec<f32>, train_meta: TrainMeta) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Dimension {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(ModelCheckpoint {
            config,
            params,
            train_meta,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn model(&self) -> Transformer<'_> {
        Transformer::new(&self.config, &self.layout, &self.params)
    }

    /// Hex SHA-256 of the parameter bytes.
    pub fn param_hash(&self) -> String {
        param_hash(&self.params)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors = self
            .layout
            .tensors
            .iter()
            .map(|t| TensorInfo {
                offset: t.offset * 4,
                ..t.clone()
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            train_meta: self.train_meta.clone(),
            tensors,
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(self.params.len() * 4);
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 26 {
            return Err(Error::Format(format!("header length {len} too large")));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| Error::Format(e.to_string()))?;
        let layout = Layout::new(&header.config);
        let dir: Vec<TensorInfo> = header
            .tensors
            .into_iter()
            .map(|t| TensorInfo {
                offset: t.offset / 4,
                ..t
            })
            .collect();
        layout.check(&dir)?;
        let mut bytes = Vec::with_capacity(layout.total * 4);
        r.read_to_end(&mut bytes)?;
        if bytes.len() != layout.total * 4 {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {}",
                bytes.len(),
                layout.total * 4
            )));
        }
        let params = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(ModelCheckpoint {
            config: header.config,
            params,
            train_meta: header.train_meta,
            layout,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
