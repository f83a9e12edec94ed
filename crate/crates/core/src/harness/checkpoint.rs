//! Single-file checkpoints: a magic line, a little-endian u64 header length,
//! a TOML header (metadata, config, tensor index) and raw little-endian f32
//! tensor data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::model::SegmentationModel;
use crate::diffcore::{AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"NFSEG-CHECKPOINT\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: SegmentationModel,
    pub adam: AdamState<f32>,
    pub epoch: usize,
    pub step: usize,
    pub best_val_iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 values.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    epoch: usize,
    step: usize,
    best_val_iou: f64,
    adam_t: u64,
    config: ExperimentConfig,
    tensors: Vec<IndexEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, model: SegmentationModel) -> Self {
        let t = &config.training;
        let adam = AdamState::new(
            AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            &model.params,
        );
        Self {
            config,
            model,
            adam,
            epoch: 0,
            step: 0,
            best_val_iou: 0.0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let mut index = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut push = |name: &str, kind, shape: &[usize], data: &[f32]| {
            index.push(IndexEntry {
                name: name.to_string(),
                kind,
                shape: shape.to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(data);
        };
        for id in params.ids() {
            let t = params.get(id);
            let kind = if params.is_trainable(id) { Kind::Param } else { Kind::Buffer };
            push(params.name(id), kind, t.shape(), t.data());
        }
        for id in params.ids() {
            if let Some((m, v)) = self.adam.moments(id) {
                let shape = params.get(id).shape();
                push(params.name(id), Kind::AdamM, shape, m);
                push(params.name(id), Kind::AdamV, shape, v);
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            epoch: self.epoch,
            step: self.step,
            best_val_iou: self.best_val_iou,
            adam_t: self.adam.t,
            config: self.config.clone(),
            tensors: index,
        };
        let text = toml::to_string(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + text.len() + 4 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a checkpoint file"))?;
        let (len, rest) = rest.split_at_checked(8).ok_or_else(|| bad("truncated header"))?;
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        let (text, payload) = rest.split_at_checked(len).ok_or_else(|| bad("truncated header"))?;
        let text = std::str::from_utf8(text).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.version)));
        }
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut ck = Checkpoint::new(header.config.clone(), SegmentationModel::new(&header.config)?);
        ck.epoch = header.epoch;
        ck.step = header.step;
        ck.best_val_iou = header.best_val_iou;
        ck.adam.t = header.adam_t;
        let mut seen = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(format!("tensor {} lies outside the payload", e.name)))?;
            let id = ck
                .model
                .params
                .find(&e.name)
                .ok_or_else(|| bad(format!("unknown tensor {}", e.name)))?;
            let expected = ck.model.params.get(id).shape().to_vec();
            if expected != e.shape {
                return Err(bad(format!("tensor {} has shape {:?}, expected {expected:?}", e.name, e.shape)));
            }
            match e.kind {
                Kind::Param | Kind::Buffer => {
                    *ck.model.params.get_mut(id) = Tensor::new(e.shape.clone(), data.to_vec())?;
                    seen += 1;
                }
                Kind::AdamM | Kind::AdamV => {
                    let (m, v) = ck
                        .adam
                        .moments_mut(id)
                        .ok_or_else(|| bad(format!("{} has no optimizer state", e.name)))?;
                    let dst = if e.kind == Kind::AdamM { m } else { v };
                    dst.copy_from_slice(data);
                }
            }
        }
        if seen != ck.model.params.len() {
            return Err(bad(format!(
                "checkpoint holds {seen} of {} model tensors",
                ck.model.params.len()
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Load {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
