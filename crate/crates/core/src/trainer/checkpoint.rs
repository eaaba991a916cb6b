//! Versioned checkpoint container: magic, format version, a JSON header,
//! then raw little-endian tensor data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig};
use super::TrainConfig;
use crate::backbone::{Backbone, BackboneConfig};
use crate::diffusion::{NoiseSchedule, ScheduleTable};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMetadata {
    pub epochs_completed: usize,
    pub global_step: u64,
    pub best_valid_loss: Option<f64>,
    pub last_train_loss: Option<f64>,
    pub train_config: Option<TrainConfig>,
    /// Free-form provenance, e.g. `"finetune"`.
    pub stage: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
    first_moment_offset: usize,
    second_moment_offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    backbone: BackboneConfig,
    schedule: ScheduleTable,
    metadata: TrainingMetadata,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    /// Reserved for an exponential moving average of the weights.
    ema: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Backbone<T>,
    pub schedule: NoiseSchedule,
    pub metadata: TrainingMetadata,
    pub optimizer: Option<AdamW<T>>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let info = self.model.tensor_info();
        let mut offset = 0;
        let tensors: Vec<TensorEntry> = info
            .into_iter()
            .map(|t| {
                let len = t.shape.iter().product();
                let entry = TensorEntry {
                    name: t.name,
                    shape: t.shape,
                    offset,
                    len,
                };
                offset += len;
                entry
            })
            .collect();
        let total = offset;
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.cfg,
            step: o.step,
            first_moment_offset: total,
            second_moment_offset: 2 * total,
        });
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            dtype: T::DTYPE,
            backbone: self.model.config().clone(),
            schedule: self.schedule.to_table(),
            metadata: self.metadata.clone(),
            tensors,
            optimizer,
            ema: None,
        };
        let json = serde_json::to_vec(&header)?;
        let copies = if self.optimizer.is_some() { 3 } else { 1 };
        let mut buf = Vec::with_capacity(24 + json.len() + copies * total * T::DTYPE.size());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in self.model.tensors() {
            t.iter().for_each(|v| v.write_le(&mut buf));
        }
        if let Some(o) = &self.optimizer {
            for moments in [&o.m, &o.v] {
                moments.iter().flatten().for_each(|v| v.write_le(&mut buf));
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint of either precision, converting to `T`.
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(format_err("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + header_len).ok_or_else(|| format_err("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[20 + header_len..];
        let size = header.dtype.size();
        let read = |offset: usize, len: usize| -> Result<Vec<T>> {
            let raw = data
                .get(offset * size..(offset + len) * size)
                .ok_or_else(|| format_err("truncated tensor data"))?;
            Ok(match header.dtype {
                DType::F32 => raw.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
                DType::F64 => raw.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
            })
        };

        let mut model = Backbone::<T>::new(header.backbone.clone(), 0)?;
        let expected = model.tensor_info();
        if expected.len() != header.tensors.len() {
            return Err(format_err(format!(
                "{} tensors stored, model needs {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for ((exp, entry), (_, dst)) in expected.iter().zip(&header.tensors).zip(model.tensors_mut()) {
            if exp.name != entry.name || exp.shape != entry.shape {
                return Err(format_err(format!("tensor {} does not match {}", entry.name, exp.name)));
            }
            dst.copy_from_slice(&read(entry.offset, entry.len)?);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let mut m = Vec::with_capacity(header.tensors.len());
                let mut v = Vec::with_capacity(header.tensors.len());
                for entry in &header.tensors {
                    m.push(read(o.first_moment_offset + entry.offset, entry.len)?);
                    v.push(read(o.second_moment_offset + entry.offset, entry.len)?);
                }
                Some(AdamW {
                    cfg: o.config,
                    step: o.step,
                    m,
                    v,
                })
            }
        };
        Ok(Self {
            model,
            schedule: NoiseSchedule::from_table(&header.schedule)?,
            metadata: header.metadata,
            optimizer,
        })
    }
}
