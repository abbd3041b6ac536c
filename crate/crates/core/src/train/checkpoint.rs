//! Binary checkpoint: `"GAIA"`, version, named f64 tensors, then a JSON blob.
//!
//! ```text
//! magic    4 bytes  "GAIA"
//! version  u32
//! count    u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, data f64 × numel }
//! meta_len u64, meta utf-8 JSON
//! ```
//! All integers and floats are little-endian. Optimizer moments are stored as
//! extra entries named `adam.m/<param>` and `adam.v/<param>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::error::{GaiaError, Result};
use crate::model::{GaiaModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GAIA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    /// Completed epochs. The shuffle stream for the next epoch is derived from
    /// `train.seed` and this value.
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    train: TrainConfig,
    model: ModelConfig,
    epoch: usize,
    adam: Option<AdamMeta>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

fn corrupt(msg: impl Into<String>) -> GaiaError {
    GaiaError::Checkpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| corrupt("tensor name is not utf-8"))?
            .to_string();
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= self.buf.len())
            .ok_or_else(|| corrupt(format!("implausible shape {shape:?} for `{name}`")))?;
        let bytes = self.take(numel * 8)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let moments = self.adam.as_ref().map_or(0, |_| 2 * self.params.len());
        out.extend_from_slice(&((self.params.len() + moments) as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        if let Some(adam) = &self.adam {
            for (name, m) in self.params.names().iter().zip(&adam.m) {
                put_tensor(&mut out, &format!("adam.m/{name}"), m);
            }
            for (name, v) in self.params.names().iter().zip(&adam.v) {
                put_tensor(&mut out, &format!("adam.v/{name}"), v);
            }
        }
        let meta = Meta {
            train: self.train.clone(),
            model: self.model.clone(),
            epoch: self.epoch,
            adam: self.adam.as_ref().map(|a| AdamMeta {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
            }),
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(&MAGIC[..]) {
            return Err(corrupt("bad magic, not a gaia checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if let Some(rest) = name.strip_prefix("adam.m/") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v/") {
                v.push((rest.to_string(), t));
            } else {
                if params.find(&name).is_some() {
                    return Err(corrupt(format!("duplicate entry `{name}`")));
                }
                params.add(name, t);
            }
        }
        let len = r.u64()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(len)?).map_err(|e| corrupt(format!("metadata: {e}")))?;
        if r.pos != buf.len() {
            return Err(corrupt("trailing bytes after metadata"));
        }
        let adam = match meta.adam {
            None => None,
            Some(a) => {
                let order = |moments: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                    if moments.len() != params.len()
                        || moments.iter().zip(params.names()).any(|((n, _), p)| n != p)
                    {
                        return Err(corrupt("optimizer moments do not match parameters"));
                    }
                    Ok(moments.into_iter().map(|(_, t)| t).collect())
                };
                Some(Adam {
                    lr: a.lr,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                    step: a.step,
                    m: order(m)?,
                    v: order(v)?,
                })
            }
        };
        Ok(Checkpoint { train: meta.train, model: meta.model, params, adam, epoch: meta.epoch })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| GaiaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| GaiaError::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Rebuilds the model and installs the stored weights.
    pub fn model(&self) -> Result<GaiaModel> {
        let mut model = GaiaModel::new(self.model.clone(), self.train.seed)?;
        let store = model.params_mut();
        if store.names() != self.params.names() {
            return Err(corrupt("parameter names do not match the model configuration"));
        }
        for (dst, src) in store.tensors_mut().iter_mut().zip(self.params.tensors()) {
            if dst.shape() != src.shape() {
                return Err(corrupt(format!(
                    "shape {:?} does not match model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(model)
    }
}
