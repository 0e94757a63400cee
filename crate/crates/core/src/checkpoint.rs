//! Saved training state and its on-disk format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "COSHCKPT"
//! u32       format version
//! u64       header length in bytes
//! ...       UTF-8 JSON header (metadata, config, array table)
//! ...       f64 values of every array, in header order
//! ```

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{build_network, Network, NetworkSpec};
use crate::params::{ParamEntry, ParamKind, ParamStore};
use crate::tensor::Tensor;
use crate::training::{CostKind, TrainConfig};

const MAGIC: &[u8; 8] = b"COSHCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// What a checkpoint needs to rebuild and re-score one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetRecord {
    pub spec: NetworkSpec,
    pub cost: CostKind,
    /// Training-split target means used by weighted costs.
    pub means: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Raw parameters and buffers at save time.
    pub params: ParamStore,
    /// EMA shadows of the trainable parameters.
    pub shadows: IndexMap<String, Tensor>,
    pub update: usize,
    pub epoch: usize,
    /// Summed validation score of `scores`.
    pub score: f64,
    pub scores: Vec<f64>,
    pub nets: Vec<NetRecord>,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    id: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<ParamKind>,
    #[serde(default)]
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    update: usize,
    epoch: usize,
    score: f64,
    scores: Vec<f64>,
    nets: Vec<NetRecord>,
    config: TrainConfig,
    params: Vec<ArrayMeta>,
    shadows: Vec<ArrayMeta>,
}

impl Checkpoint {
    /// Parameters used for evaluation: the raw store with every shadowed
    /// parameter replaced by its EMA value.
    pub fn eval_store(&self) -> Result<ParamStore> {
        let mut out = self.params.clone();
        for (id, shadow) in &self.shadows {
            out.set(id, shadow.clone())?;
        }
        Ok(out)
    }

    /// Rebuilds the network structures. Their parameter ids are checked
    /// against the saved store.
    pub fn networks(&self) -> Result<Vec<Network>> {
        let mut scratch = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut nets = Vec::new();
        for rec in &self.nets {
            let net = build_network(&rec.spec, &mut scratch, &mut rng)?;
            for id in net.param_ids() {
                let want = scratch.get(&id)?.shape();
                let have = self
                    .params
                    .get(&id)
                    .map_err(|_| Error::data(format!("checkpoint lacks parameter {id}")))?;
                if have.shape() != want {
                    return Err(Error::data(format!(
                        "checkpoint parameter {id} has shape {:?}, network expects {want:?}",
                        have.shape()
                    )));
                }
            }
            nets.push(net);
        }
        Ok(nets)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            update: self.update,
            epoch: self.epoch,
            score: self.score,
            scores: self.scores.clone(),
            nets: self.nets.clone(),
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(id, e)| ArrayMeta {
                    id: id.to_string(),
                    shape: e.value.shape().to_vec(),
                    kind: Some(e.kind),
                    frozen: e.frozen,
                })
                .collect(),
            shadows: self
                .shadows
                .iter()
                .map(|(id, t)| ArrayMeta {
                    id: id.clone(),
                    shape: t.shape().to_vec(),
                    kind: None,
                    frozen: false,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::invalid(format!("cannot encode checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let arrays = self
            .params
            .iter()
            .map(|(_, e)| &e.value)
            .chain(self.shadows.values());
        for t in arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| Error::data("checkpoint header too large"))?;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::data(format!("corrupt checkpoint header: {e}")))?;

        let mut params = ParamStore::new();
        for meta in &header.params {
            let value = r.tensor(&meta.shape)?;
            let kind = meta
                .kind
                .ok_or_else(|| Error::data(format!("parameter {} has no kind", meta.id)))?;
            params.insert_entry(
                meta.id.clone(),
                ParamEntry {
                    value,
                    kind,
                    frozen: meta.frozen,
                },
            );
        }
        let mut shadows = IndexMap::new();
        for meta in &header.shadows {
            if !params.contains(&meta.id) {
                return Err(Error::data(format!(
                    "shadow {} has no matching parameter",
                    meta.id
                )));
            }
            shadows.insert(meta.id.clone(), r.tensor(&meta.shape)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::data(format!(
                "{} trailing bytes after checkpoint data",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            params,
            shadows,
            update: header.update,
            epoch: header.epoch,
            score: header.score,
            scores: header.scores,
            nets: header.nets,
            config: header.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data("checkpoint truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::data("array too large"))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}
