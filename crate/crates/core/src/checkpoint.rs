//! Self-describing checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "capocr-checkpoint\n"  u32 version
//! u64 header length, header as TOML (model config, alphabet, preprocessing,
//!     step, lineage, optimizer hyperparameters)
//! u32 tensor count, then per tensor:
//!     u32 name length, name, u8 decay flag, u32 rank, u64 extents, f64 values
//! u8 optimizer flag; when set: u64 update count, then first and second
//!     moments of every tensor in order
//! 32-byte SHA-256 of everything before it
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Captioner, ModelConfig};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::ParamStore;
use crate::preprocess::Preprocess;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"capocr-checkpoint\n";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

/// One training stage's provenance: the weights it started from and produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamWConfig,
    peak_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    step: u64,
    alphabet: String,
    model: ModelConfig,
    preprocess: Preprocess,
    #[serde(default)]
    lineage: Vec<LineageEntry>,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub preprocess: Preprocess,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    /// Optimizer updates applied so far.
    pub step: u64,
    pub lineage: Vec<LineageEntry>,
}

impl Checkpoint {
    /// Stores the evaluation form of `preprocess`.
    pub fn new(model: &Captioner, vocab: &Vocab, preprocess: Preprocess) -> Self {
        Checkpoint {
            config: model.config().clone(),
            vocab: vocab.clone(),
            preprocess: preprocess.deterministic(),
            params: model.params().clone(),
            optimizer: None,
            step: 0,
            lineage: Vec::new(),
        }
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn model(&self) -> Result<Captioner> {
        Captioner::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            step: self.step,
            alphabet: self.vocab.alphabet(),
            model: self.config.clone(),
            preprocess: self.preprocess,
            lineage: self.lineage.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config,
                peak_lr: o.peak_lr,
            }),
        };
        let header = toml::to_string(&header).map_err(|e| Error::Argument(format!("checkpoint header: {e}")))?;
        let mut out = Vec::with_capacity(64 + 8 * self.params.numel() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(u8::from(p.decay));
            out.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
            for &d in p.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, p.tensor.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&o.step_count.to_le_bytes());
                for m in o.first_moment.iter().chain(&o.second_moment) {
                    put_f64s(&mut out, m);
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], source_name: &str) -> Result<Self> {
        let err = |msg: &str| Error::parse(source_name, 0, msg);
        if bytes.len() < MAGIC.len() + 32 || !bytes.starts_with(MAGIC) {
            return Err(err("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(err("checksum mismatch"));
        }
        let mut r = Reader {
            buf: &body[MAGIC.len()..],
        };
        let version = r.u32().ok_or_else(|| err("truncated version"))?;
        if version != FORMAT_VERSION {
            return Err(err(&format!("unsupported format version {version}")));
        }
        let hlen = r.len64().ok_or_else(|| err("truncated header length"))?;
        let htext = r.take(hlen).ok_or_else(|| err("truncated header"))?;
        let htext = std::str::from_utf8(htext).map_err(|_| err("header is not UTF-8"))?;
        let header: Header = toml::from_str(htext).map_err(|e| err(&format!("header: {}", e.message())))?;
        let vocab = Vocab::new(&header.alphabet)?;

        let count = r.u32().ok_or_else(|| err("truncated tensor count"))? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32().ok_or_else(|| err("truncated tensor name"))? as usize;
            let name = r.take(nlen).ok_or_else(|| err("truncated tensor name"))?;
            let name = std::str::from_utf8(name).map_err(|_| err("tensor name is not UTF-8"))?;
            if params.find(name).is_some() {
                return Err(err(&format!("duplicate tensor {name}")));
            }
            let decay = match r.u8() {
                Some(0) => false,
                Some(1) => true,
                _ => return Err(err("bad decay flag")),
            };
            let rank = r.u32().ok_or_else(|| err("truncated rank"))? as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(err(&format!("tensor {name}: rank {rank} out of range")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len64().ok_or_else(|| err("truncated extent"))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| err("tensor too large"))?;
            let data = r.f64s(numel).ok_or_else(|| err(&format!("tensor {name}: truncated data")))?;
            let tensor = Tensor::new(shape, data).map_err(|e| err(&format!("tensor {name}: {e}")))?;
            params.push(name, tensor, decay);
        }

        let optimizer = match (r.u8(), header.optimizer) {
            (Some(0), _) => None,
            (Some(1), Some(meta)) => {
                let step_count = r.u64().ok_or_else(|| err("truncated optimizer step"))?;
                let mut moments = Vec::with_capacity(2 * params.len());
                for _ in 0..2 {
                    for p in params.iter() {
                        moments.push(r.f64s(p.tensor.numel()).ok_or_else(|| err("truncated optimizer moments"))?);
                    }
                }
                let second_moment = moments.split_off(params.len());
                if second_moment.iter().flatten().any(|&v| v < 0.0 || v.is_nan()) {
                    return Err(err("negative second moment"));
                }
                Some(OptimizerState {
                    config: meta.config,
                    peak_lr: meta.peak_lr,
                    first_moment: moments,
                    second_moment,
                    step_count,
                })
            }
            _ => return Err(err("bad optimizer section")),
        };
        if !r.buf.is_empty() {
            return Err(err("trailing bytes"));
        }
        Ok(Checkpoint {
            config: header.model,
            vocab,
            preprocess: header.preprocess,
            params,
            optimizer,
            step: header.step,
            lineage: header.lineage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
}

struct Reader<'b> {
    buf: &'b [u8],
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Option<&'b [u8]> {
        if n > self.buf.len() {
            return None;
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Some(head)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn len64(&mut self) -> Option<usize> {
        self.u64().and_then(|v| usize::try_from(v).ok())
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8)?)?;
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::AugmentConfig;

    fn tiny() -> (Captioner, Vocab) {
        let vocab = Vocab::new("AB").unwrap();
        let config = ModelConfig {
            patch_size: 4,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ffn: 16,
            vocab_size: vocab.len(),
            max_target_len: 4,
            input_resolution: 8,
            pretrain_resolution: 8,
            dropout: 0.0,
        };
        (Captioner::new(config, 3).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, vocab) = tiny();
        let mut ck = Checkpoint::new(&model, &vocab, Preprocess::Aspect(AugmentConfig::default()));
        let mut opt = OptimizerState::new(model.params(), AdamWConfig::default(), 3e-4);
        opt.step_count = 7;
        opt.first_moment[0][0] = -0.25;
        ck.optimizer = Some(opt);
        ck.step = 7;
        ck.lineage.push(LineageEntry {
            stage: "mt".into(),
            input: "a".into(),
            output: "b".into(),
        });
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes, "ck").unwrap(), ck);
    }

    #[test]
    fn corruption_is_detected() {
        let (model, vocab) = tiny();
        let mut bytes = Checkpoint::new(&model, &vocab, Preprocess::Stretch { resolution: 8 })
            .to_bytes()
            .unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes, "ck").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..10], "ck").is_err());
    }
}
