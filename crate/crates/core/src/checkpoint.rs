//! Single-file checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"BOBCKPT\n"  u32 version  u64 header_len  header (JSON)
//! u32 records, then per record:
//!   u32 name_len  name  u32 ndim  u64 dims[ndim]  f64 values[prod(dims)]
//! ```
//!
//! The header holds the configs, vocabulary, step counter, optimizer step
//! and dropout RNG position. Records hold every parameter under its own
//! name, then the optimizer moments as `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{BobModel, ModelConfig};
use crate::objectives::{Adam, RngState, TrainConfig, Trainer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BOBCKPT\n";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vocab,
    step: u64,
    adam_step: u64,
    rng: RngState,
}

/// A trainer together with the vocabulary it was built over.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub trainer: Trainer,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn new(trainer: Trainer, vocab: Vocab) -> Self {
        Self { trainer, vocab }
    }

    pub fn model(&self) -> &BobModel {
        &self.trainer.model
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = &self.trainer;
        let header = Header {
            model: t.model.config().clone(),
            train: t.config.clone(),
            vocab: self.vocab.clone(),
            step: t.step,
            adam_step: t.optimizer.t,
            rng: RngState::capture(&t.dropout_rng),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);

        let store = t.model.params();
        let mut records: Vec<(String, &Tensor)> = store.iter().map(|(_, n, x)| (n.to_string(), x)).collect();
        for (prefix, moments) in [("adam.m.", &t.optimizer.m), ("adam.v.", &t.optimizer.v)] {
            for ((_, n, _), x) in store.iter().zip(moments) {
                records.push((format!("{prefix}{n}"), x));
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, x) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(x.ndim() as u32).to_le_bytes());
            for &d in x.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in x.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        header.model.validate()?;
        header.train.validate()?;
        if header.vocab.len() != header.model.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries but the model expects {}",
                header.vocab.len(),
                header.model.vocab_size
            )));
        }

        let mut model = BobModel::new(header.model.clone(), 0)?;
        let mut optimizer = Adam::new(model.params(), header.train.adam());
        optimizer.t = header.adam_step;
        let n = model.params().len();
        let count = r.u32()? as usize;
        if count != 3 * n {
            return Err(Error::Checkpoint(format!("expected {} records, found {count}", 3 * n)));
        }
        for i in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(shape, data)?;
            let (kind, id) = (i / n, model.params().ids().nth(i % n).unwrap());
            let expected = match kind {
                0 => model.params().name(id).to_string(),
                1 => format!("adam.m.{}", model.params().name(id)),
                _ => format!("adam.v.{}", model.params().name(id)),
            };
            if name != expected {
                return Err(Error::Checkpoint(format!("record {i} is `{name}`, expected `{expected}`")));
            }
            if tensor.shape() != model.params().get(id).shape() {
                return Err(Error::Checkpoint(format!("record `{name}` has shape {:?}", tensor.shape())));
            }
            match kind {
                0 => *model.params_mut().get_mut(id) = tensor,
                1 => optimizer.m[id.index()] = tensor,
                _ => optimizer.v[id.index()] = tensor,
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last record".into()));
        }
        let trainer = Trainer {
            model,
            optimizer,
            config: header.train,
            step: header.step,
            dropout_rng: header.rng.restore(),
        };
        Ok(Self {
            trainer,
            vocab: header.vocab,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
