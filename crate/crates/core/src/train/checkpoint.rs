//! Binary checkpoint, little-endian throughout:
//!
//! ```text
//! "LCKP" | u32 version | u32 config_len | config JSON
//! u32 tensor_count | per tensor: u16 name_len | name | u8 rank | u32 dims[rank] | f32 data
//! ```
//!
//! Tensors are the base weights, the adapter (`lora.*`) and the AdamW
//! moments (`adamw.m.*`, `adamw.v.*`); the JSON carries the configuration,
//! the step and the optimizer scalars.

use std::collections::BTreeMap;

use layerforge_autodiff::{AdamW, Moments, OptimizerState, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::trainer::RunConfig;
use crate::model::{base_shapes, lora_shapes, DiTWeights, LoraAdapter, Model, ModelConfig, ModelError, ParamMap};

pub const MAGIC: &[u8; 4] = b"LCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
    #[error("checkpoint config: {0}")]
    Config(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    run: RunConfig,
    step: u64,
    adamw: AdamWHeader,
}

#[derive(Serialize, Deserialize)]
struct AdamWHeader {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step: u64,
    param_steps: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub step: u64,
    pub model: Model,
    pub optimizer: OptimizerState,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let opt = &ckpt.optimizer;
    let header = Header {
        run: ckpt.run.clone(),
        step: ckpt.step,
        adamw: AdamWHeader {
            lr: opt.hyper.lr,
            beta1: opt.hyper.beta1,
            beta2: opt.hyper.beta2,
            eps: opt.hyper.eps,
            weight_decay: opt.hyper.weight_decay,
            step: opt.step,
            param_steps: opt.moments.iter().map(|(k, m)| (k.clone(), m.step)).collect(),
        },
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    tensors.extend(ckpt.model.weights.params.iter().map(|(k, v)| (k.clone(), v)));
    tensors.extend(ckpt.model.adapter.params.iter().map(|(k, v)| (k.clone(), v)));
    for (k, m) in &opt.moments {
        tensors.push((format!("adamw.m.{k}"), &m.m));
        tensors.push((format!("adamw.v.{k}"), &m.v));
    }
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(&json);
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint and checks every tensor against the shapes its own
/// config implies.
pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    load_inner(bytes, None)
}

/// Like [`load_checkpoint`], but shapes are checked against `expected`;
/// a mismatch names the first offending tensor.
pub fn load_checkpoint_for(bytes: &[u8], expected: &ModelConfig) -> Result<Checkpoint, CheckpointError> {
    load_inner(bytes, Some(expected))
}

fn load_inner(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32("config length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "config")?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let count = r.u32("tensor count")?;
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| CheckpointError::Config(format!("tensor name: {e}")))?
            .to_owned();
        let rank = r.u8("tensor rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("tensor dims").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("tensor data"))?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data).expect("length matches shape"));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - r.pos));
    }

    let config = header.run.model.clone();
    let check_against = expected.unwrap_or(&config);
    let mut take = |layout: Vec<(String, Vec<usize>)>| -> Result<ParamMap, CheckpointError> {
        let mut out = ParamMap::new();
        for (name, shape) in layout {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            out.insert(name, t);
        }
        Ok(out)
    };
    let weights = take(base_shapes(check_against))?;
    let adapter = take(lora_shapes(check_against))?;
    let mut moments = BTreeMap::new();
    for (name, steps) in &header.adamw.param_steps {
        let shape = weights
            .get(name)
            .or_else(|| adapter.get(name))
            .ok_or_else(|| CheckpointError::UnexpectedTensor(format!("adamw.*.{name}")))?
            .shape()
            .to_vec();
        let mut moment = |kind: &str| {
            take(vec![(format!("adamw.{kind}.{name}"), shape.clone())]).map(|mut m| m.pop_first().unwrap().1)
        };
        let m = moment("m")?;
        let v = moment("v")?;
        moments.insert(name.clone(), Moments { m, v, step: *steps });
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::UnexpectedTensor(extra.clone()));
    }
    let model = Model {
        weights: DiTWeights::from_params(check_against, weights)?,
        adapter: LoraAdapter::from_params(check_against, adapter)?,
        config: check_against.clone(),
    };
    let a = &header.adamw;
    let optimizer = OptimizerState {
        hyper: AdamW {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        },
        step: a.step,
        moments,
        check_finite: true,
    };
    Ok(Checkpoint {
        run: header.run,
        step: header.step,
        model,
        optimizer,
    })
}
