//! Binary checkpoint format.
//!
//! ```text
//! "CVLM"  u32 version  u64 header_len  header JSON (config, vocabulary, step counters)
//! u32 n_params   then per parameter:  name, u32 ndim, u64 dims..., f64 data...
//! u64 optimizer steps  u32 n_moments  then per entry:  name, u64 steps, f64 m..., f64 v...
//! ```
//! Names are `u32` length + UTF-8 bytes; all integers and floats little-endian.
//! Moment tensors take the shape of their parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::optim::{Adam, Moments};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"CVLM";
pub const FORMAT_VERSION: u32 = 1;

/// Optimizer steps taken in each training stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSteps {
    pub pretrain: u64,
    pub finetune: u64,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub steps: StageSteps,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocabulary: Vec<String>,
    steps: StageSteps,
}

impl Checkpoint {
    /// Fresh parameters for `config`.
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(Error::config(
                "model.vocab_size",
                format!("{} is smaller than the dataset vocabulary of {}", config.vocab_size, vocab.len()),
            ));
        }
        let params = ParamStore::init(&config, seed);
        Ok(Checkpoint {
            config,
            vocab,
            params,
            optimizer: Adam::new(),
            steps: StageSteps::default(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            vocabulary: self.vocab.words().to_vec(),
            steps: self.steps,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + self.params.num_scalars() * 8 * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_name(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_floats(&mut out, t.data());
        }
        out.extend_from_slice(&self.optimizer.steps().to_le_bytes());
        let moments: Vec<_> = self.optimizer.moments().collect();
        out.extend_from_slice(&(moments.len() as u32).to_le_bytes());
        for (name, m) in moments {
            put_name(&mut out, name);
            out.extend_from_slice(&m.steps.to_le_bytes());
            put_floats(&mut out, m.m.data());
            put_floats(&mut out, m.v.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
        let vocab = Vocabulary::from_words(header.vocabulary).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let n = r.u32()? as usize;
        let mut named = Vec::with_capacity(n);
        let mut shapes = BTreeMap::new();
        for _ in 0..n {
            let name = r.name()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let data = r.floats(len)?;
            let t = Tensor::new(shape.clone(), data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            shapes.insert(name.clone(), shape);
            named.push((name, t));
        }
        let params = ParamStore::from_named(&header.config, named).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let opt_steps = r.u64()?;
        let n = r.u32()? as usize;
        let mut moments = BTreeMap::new();
        for _ in 0..n {
            let name = r.name()?;
            let shape = shapes
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))?
                .clone();
            let steps = r.u64()?;
            let len = shape.iter().product();
            let m = Tensor::new(shape.clone(), r.floats(len)?)?;
            let v = Tensor::new(shape, r.floats(len)?)?;
            moments.insert(name, Moments { m, v, steps });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config: header.config,
            vocab,
            params,
            optimizer: Adam::from_parts(opt_steps, moments),
            steps: header.steps,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("oversized tensor".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_vocab;
    use std::collections::HashMap;

    fn ckpt() -> Checkpoint {
        let vocab = build_vocab(&["small focal cavity"], 64).unwrap();
        Checkpoint::init(ModelConfig::toy(), vocab, 4).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut c = ckpt();
        let grads = HashMap::from([("heads.detect.b".to_string(), Tensor::full(&[6], 0.3))]);
        c.optimizer
            .step(&mut c.params, &grads, &crate::optim::AdamConfig::default())
            .unwrap();
        c.steps.pretrain = 1;
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CVLM");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let bytes = ckpt().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn vocabulary_must_fit_model() {
        let words: Vec<String> = (0..300).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::from_words(words).unwrap();
        assert!(Checkpoint::init(ModelConfig::toy(), vocab, 0).is_err());
    }
}
