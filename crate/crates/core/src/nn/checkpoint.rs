//! Binary checkpoint format, little-endian:
//!
//! ```text
//! "ALCK" | version u32 | header length u32 | JSON header
//! | per tensor: name length u16, name, rank u8, dims u32 x rank, f32 data
//! | CRC32 of everything before it
//! ```
//!
//! Tensors are the trainable parameters under their own names, batch-norm
//! running statistics as `<bn>.running_mean` / `<bn>.running_var`, and Adam
//! moments as `adam.m.<param>` / `adam.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::RunningStats;
use crate::nn::{build_model, AdamState, EpochRecord, Model, ModelSpec, TrainConfig};
use crate::oscillations::{decode_enveloped, ByteReader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ALCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model together with its training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub config: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamState<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    config: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    adam_step: u64,
    tensor_count: usize,
}

struct NamedTensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<NamedTensor> {
        let network = &self.model.network;
        let mut out = Vec::new();
        let params = network.params();
        for p in &params {
            out.push(NamedTensor {
                name: p.name.clone(),
                dims: p.shape.clone(),
                data: p.value.clone(),
            });
        }
        for bn in network.batchnorms() {
            if let Some(stats) = &bn.running {
                for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                    out.push(NamedTensor {
                        name: format!("{}.{suffix}", bn.name),
                        dims: vec![values.len()],
                        data: values.clone(),
                    });
                }
            }
        }
        let moments = [("m", &self.optimizer.m), ("v", &self.optimizer.v)];
        for (tag, values) in moments {
            for (p, v) in params.iter().zip(values.iter()) {
                out.push(NamedTensor {
                    name: format!("adam.{tag}.{}", p.name),
                    dims: p.shape.clone(),
                    data: v.clone(),
                });
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let header = Header {
            spec: self.model.spec.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            adam_step: self.optimizer.step,
            tensor_count: tensors.len(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::invalid(format!("tensor name `{}` is too long", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        decode_enveloped(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, parse_body)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_body(r: &mut ByteReader<'_>) -> Result<Checkpoint> {
    let json_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Malformed(format!("checkpoint header: {e}")))?;
    header.config.validate()?;

    let mut tensors = BTreeMap::new();
    for _ in 0..header.tensor_count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        if len.saturating_mul(4) > r.remaining() {
            return Err(Error::Truncated(format!("tensor `{name}` needs {len} values")));
        }
        let data = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Malformed(format!("tensor `{name}` appears twice")));
        }
    }
    if !r.is_empty() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last tensor",
            r.remaining()
        )));
    }

    let has_stats = tensors.keys().any(|k| k.ends_with(".running_mean"));
    let has_moments = tensors.keys().any(|k| k.starts_with("adam."));
    let mut model: Model<f32> = build_model(&header.spec, 0)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let (dims, data) = tensors
            .remove(name)
            .ok_or_else(|| Error::Malformed(format!("missing tensor `{name}`")))?;
        if dims != shape {
            return Err(Error::Malformed(format!(
                "tensor `{name}` has shape {dims:?}, the model expects {shape:?}"
            )));
        }
        Ok(data)
    };

    let mut moments = (Vec::new(), Vec::new());
    for p in model.network.params_mut() {
        p.value = take(&p.name, &p.shape.clone())?;
    }
    for bn in model.network.batchnorms_mut() {
        if has_stats {
            let c = [bn.channels()];
            bn.running = Some(RunningStats {
                mean: take(&format!("{}.running_mean", bn.name), &c)?,
                var: take(&format!("{}.running_var", bn.name), &c)?,
            });
        }
    }
    for p in model.network.params() {
        if has_moments {
            moments.0.push(take(&format!("adam.m.{}", p.name), &p.shape)?);
            moments.1.push(take(&format!("adam.v.{}", p.name), &p.shape)?);
        } else {
            moments.0.push(vec![0.0; p.value.len()]);
            moments.1.push(vec![0.0; p.value.len()]);
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Malformed(format!("unexpected tensor `{extra}`")));
    }
    if header.history.len() != header.epoch {
        return Err(Error::Malformed(format!(
            "{} history records for {} completed epochs",
            header.history.len(),
            header.epoch
        )));
    }
    Ok(Checkpoint {
        model,
        config: header.config,
        epoch: header.epoch,
        history: header.history,
        optimizer: AdamState {
            step: header.adam_step,
            m: moments.0,
            v: moments.1,
        },
    })
}
