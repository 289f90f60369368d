//! Binary checkpoint format.
//!
//! ```text
//! "DAPD"            4 bytes magic
//! version           u32 LE
//! header_len        u32 LE
//! header            header_len bytes of UTF-8 JSON: config, sections, train_meta
//! parameters        little-endian f32, sections in declared order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ParamLayout};
use crate::error::{DapdError, Result};

pub const MAGIC: &[u8; 4] = b"DAPD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub steps: usize,
    pub final_loss: f64,
    pub seed: u64,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    sections: Vec<SectionHeader>,
    train_meta: TrainMeta,
}

/// Trained model: config, flat parameters and training metadata. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f32>,
    meta: TrainMeta,
}

impl PartialEq for ParamLayout {
    fn eq(&self, other: &Self) -> bool {
        self.sections == other.sections
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: Vec<f32>, meta: TrainMeta) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.num_params() {
            return Err(DapdError::Checkpoint(format!(
                "{} parameters, config requires {}",
                params.len(),
                layout.num_params()
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
            meta,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            sections: self
                .layout
                .sections
                .iter()
                .map(|s| SectionHeader {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                })
                .collect(),
            train_meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| DapdError::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for s in &self.layout.sections {
            for &p in &self.params[s.range()] {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| DapdError::Checkpoint("file too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(DapdError::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(DapdError::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; header_len];
        r.read_exact(&mut json)
            .map_err(|_| DapdError::Checkpoint("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| DapdError::Checkpoint(format!("bad header: {e}")))?;
        header.config.validate()?;

        let layout = ParamLayout::new(&header.config);
        let declared: Vec<(&str, &[usize])> = header
            .sections
            .iter()
            .map(|s| (s.name.as_str(), s.shape.as_slice()))
            .collect();
        let expected: Vec<(&str, &[usize])> = layout
            .sections
            .iter()
            .map(|s| (s.name.as_str(), s.shape.as_slice()))
            .collect();
        if declared != expected {
            return Err(DapdError::Checkpoint(
                "section table does not match the declared config".into(),
            ));
        }

        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * layout.num_params() {
            return Err(DapdError::Checkpoint(format!(
                "{} parameter bytes, config requires {}",
                bytes.len(),
                4 * layout.num_params()
            )));
        }
        let params = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(header.config, params, header.train_meta)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| DapdError::Checkpoint("truncated file".into()))?;
    Ok(u32::from_le_bytes(b))
}
