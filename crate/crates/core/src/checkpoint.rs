//! Binary checkpoints: model, optional edge projections, optional
//! optimizer moments.
//!
//! Layout: magic `TPCK`, format version (u32 LE), header length (u64 LE),
//! a JSON header, then every tensor listed in the header as f64 LE in
//! header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamState, ModelConfig, ParamSet, PolicyModel};
use crate::objectives::EdgeProjections;
use crate::vocab::ToolVocabulary;

const MAGIC: &[u8; 4] = b"TPCK";
pub const FORMAT_VERSION: u32 = 1;

/// Adam moments stored by tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn named<P: ParamSet>(p: &P) -> Vec<NamedTensor> {
    p.tensors()
        .into_iter()
        .map(|t| NamedTensor {
            name: t.name,
            shape: t.shape,
            data: t.data.to_vec(),
        })
        .collect()
}

fn restore<P: ParamSet>(dst: &mut P, src: &[NamedTensor]) -> Result<()> {
    let layout: Vec<(String, Vec<usize>)> =
        dst.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
    if layout.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            layout.len(),
            src.len()
        )));
    }
    for ((name, shape), t) in layout.iter().zip(src) {
        if *name != t.name || *shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                t.name, t.shape, name, shape
            )));
        }
    }
    for (d, t) in dst.tensors_mut().into_iter().zip(src) {
        d.copy_from_slice(&t.data);
    }
    Ok(())
}

impl OptimizerSnapshot {
    pub fn capture<P: ParamSet>(state: &AdamState<P>) -> Self {
        Self {
            config: state.config,
            step: state.step,
            m: named(&state.m),
            v: named(&state.v),
        }
    }

    pub fn restore<P: ParamSet>(&self, like: &P) -> Result<AdamState<P>> {
        let mut state = AdamState::new(like);
        state.config = self.config;
        state.step = self.step;
        restore(&mut state.m, &self.m)?;
        restore(&mut state.v, &self.v)?;
        Ok(state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PolicyModel,
    pub vocab_hash: String,
    pub projections: Option<EdgeProjections>,
    pub optimizer: Option<OptimizerSnapshot>,
    /// Free-form metadata (stage name, step counts, ...).
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    vocab_hash: String,
    meta: BTreeMap<String, String>,
    model: Vec<TensorEntry>,
    projections: Option<Vec<TensorEntry>>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
    m: Vec<TensorEntry>,
    v: Vec<TensorEntry>,
}

fn entries(ts: &[NamedTensor]) -> Vec<TensorEntry> {
    ts.iter()
        .map(|t| TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect()
}

impl Checkpoint {
    pub fn new(model: PolicyModel, vocab: &ToolVocabulary) -> Self {
        Self {
            model,
            vocab_hash: vocab.hash(),
            projections: None,
            optimizer: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = named(&self.model.params);
        let proj = self.projections.as_ref().map(named);
        let header = Header {
            model_config: self.model.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            meta: self.meta.clone(),
            model: entries(&model),
            projections: proj.as_deref().map(entries),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
                m: entries(&o.m),
                v: entries(&o.v),
            }),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut push = |ts: &[NamedTensor]| {
            for t in ts {
                for x in &t.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        };
        push(&model);
        if let Some(p) = &proj {
            push(p);
        }
        if let Some(o) = &self.optimizer {
            push(&o.m);
            push(&o.v);
        }
        out
    }

    /// Parses a checkpoint and checks it against `vocab`.
    pub fn from_bytes(bytes: &[u8], vocab: &ToolVocabulary) -> Result<Self> {
        let ck = Self::from_bytes_unchecked(bytes)?;
        let expected = vocab.hash();
        if ck.vocab_hash != expected {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {}, vocabulary {}",
                ck.vocab_hash, expected
            )));
        }
        Ok(ck)
    }

    pub fn from_bytes_unchecked(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        header.model_config.validate()?;

        let model_t = r.tensors(&header.model)?;
        let mut model = PolicyModel::init_zeroed(header.model_config.clone());
        restore(&mut model.params, &model_t)?;
        let projections = match &header.projections {
            Some(e) => {
                let t = r.tensors(e)?;
                let shape = |i: usize| t.get(i).map(|x| x.shape.clone()).unwrap_or_default();
                if t.len() != 2 || shape(0).len() != 2 || shape(0) != shape(1) {
                    return Err(Error::Checkpoint("malformed edge projections".into()));
                }
                let (p, d) = (shape(0)[0], shape(0)[1]);
                let mut proj = EdgeProjections {
                    w_h: ndarray::Array2::zeros((p, d)),
                    w_e: ndarray::Array2::zeros((p, d)),
                };
                restore(&mut proj, &t)?;
                Some(proj)
            }
            None => None,
        };
        let optimizer = match &header.optimizer {
            Some(o) => Some(OptimizerSnapshot {
                config: o.config,
                step: o.step,
                m: r.tensors(&o.m)?,
                v: r.tensors(&o.v)?,
            }),
            None => None,
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after tensors",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model,
            vocab_hash: header.vocab_hash,
            projections,
            optimizer,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, vocab: &ToolVocabulary) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, vocab)
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
            .ok_or_else(|| Error::Checkpoint("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensors(&mut self, entries: &[TensorEntry]) -> Result<Vec<NamedTensor>> {
        entries
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let raw = self.take(n * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Ok(NamedTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data,
                })
            })
            .collect()
    }
}

#[cfg(test)]
fn zero_params(config: &ModelConfig) -> crate::nn::Params {
    PolicyModel::init_zeroed(config.clone()).params
}
