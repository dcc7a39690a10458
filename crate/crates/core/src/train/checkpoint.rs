//! Self-describing binary checkpoint.
//!
//! Layout (little-endian): magic `ADNERCK1`; u32 metadata length and UTF-8
//! `key = value` metadata (model config, any extra run settings, vocabulary,
//! tag index); u32 tensor count; per tensor a u16 name length and UTF-8 name,
//! u8 rank, rank u32 dims and f32 data; finally the CRC32 of every
//! preceding byte.

use std::path::Path;

use thiserror::Error;

use crate::compute::Tensor;
use crate::corpus::{TagIndex, Vocab};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"ADNERCK1";

const VOCAB_MIN_FREQ: &str = "vocab.min_freq";
const VOCAB_TOKEN: &str = "vocab.token";
const TAG: &str = "tags.tag";
const MODEL_PREFIX: &str = "model.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint checksum mismatch (corrupt or truncated)")]
    ChecksumMismatch,
    #[error("checkpoint tensors do not match the embedded config: {0}")]
    ShapeMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Everything needed to tag text with a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab: Vocab,
    pub tag_index: TagIndex,
    /// Run settings stored alongside the model, in order. Keys must not start
    /// with `model.`, `vocab.` or `tags.`.
    pub settings: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut meta = String::new();
        for (k, v) in self.config().entries() {
            meta.push_str(&format!("{MODEL_PREFIX}{k} = {v}\n"));
        }
        for (k, v) in &self.settings {
            if [MODEL_PREFIX, "vocab.", "tags."].iter().any(|p| k.starts_with(p)) || k.contains('=') {
                return Err(CheckpointError::Malformed(format!("reserved setting key {k:?}")));
            }
            meta.push_str(&format!("{k} = {v}\n"));
        }
        meta.push_str(&format!("{VOCAB_MIN_FREQ} = {}\n", self.vocab.min_freq()));
        for t in self.vocab.tokens() {
            meta.push_str(&format!("{VOCAB_TOKEN} = {t}\n"));
        }
        for t in self.tag_index.tags() {
            meta.push_str(&format!("{TAG} = {t}\n"));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&u32_len(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let params = self.params.params();
        out.extend_from_slice(&u32_len(params.len(), "tensor count")?.to_le_bytes());
        for p in params {
            let name_len = u16::try_from(p.name.len())
                .map_err(|_| CheckpointError::Malformed(format!("tensor name {} too long", p.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            let shape = p.tensor.shape();
            let rank = u8::try_from(shape.len()).map_err(|_| CheckpointError::Malformed("rank > 255".into()))?;
            out.push(rank);
            for &d in shape {
                out.extend_from_slice(&u32_len(d, "dimension")?.to_le_bytes());
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 4 {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(CheckpointError::ChecksumMismatch);
        }

        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("metadata is not UTF-8: {e}")))?;
        let parsed = Metadata::parse(meta)?;

        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Malformed(format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            named.push((name, tensor));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        let params = ModelParams::from_named(&parsed.config, named)
            .map_err(|e| CheckpointError::ShapeMismatch(e.to_string()))?;
        if parsed.vocab.len() != parsed.config.vocab_size || parsed.tag_index.len() != parsed.config.n_tags {
            return Err(CheckpointError::ShapeMismatch(format!(
                "vocabulary {} / tags {} vs config {} / {}",
                parsed.vocab.len(),
                parsed.tag_index.len(),
                parsed.config.vocab_size,
                parsed.config.n_tags
            )));
        }
        Ok(Self {
            params,
            vocab: parsed.vocab,
            tag_index: parsed.tag_index,
            settings: parsed.settings,
        })
    }
}

fn u32_len(n: usize, what: &str) -> Result<u32, CheckpointError> {
    u32::try_from(n).map_err(|_| CheckpointError::Malformed(format!("{what} {n} exceeds u32")))
}

struct Metadata {
    config: ModelConfig,
    vocab: Vocab,
    tag_index: TagIndex,
    settings: Vec<(String, String)>,
}

impl Metadata {
    fn parse(text: &str) -> Result<Self, CheckpointError> {
        let mut config = ModelConfig::desk(0, 0);
        let mut seen_model = 0;
        let mut min_freq = None;
        let (mut tokens, mut tags, mut settings) = (Vec::new(), Vec::new(), Vec::new());
        for line in text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| CheckpointError::Malformed(format!("metadata line {line:?}")))?;
            if let Some(field) = k.strip_prefix(MODEL_PREFIX) {
                if !config.set(field, v).map_err(CheckpointError::Malformed)? {
                    return Err(CheckpointError::Malformed(format!("unknown model key {k}")));
                }
                seen_model += 1;
            } else if k == VOCAB_MIN_FREQ {
                min_freq = Some(v.parse().map_err(|_| CheckpointError::Malformed(format!("{k} = {v}")))?);
            } else if k == VOCAB_TOKEN {
                tokens.push(v.to_string());
            } else if k == TAG {
                tags.push(v.to_string());
            } else {
                settings.push((k.to_string(), v.to_string()));
            }
        }
        if seen_model != config.entries().len() {
            return Err(CheckpointError::Malformed("incomplete model config".into()));
        }
        let min_freq = min_freq.ok_or_else(|| CheckpointError::Malformed(format!("missing {VOCAB_MIN_FREQ}")))?;
        let tag_index = TagIndex::from_tags(tags).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok(Self {
            config,
            vocab: Vocab::from_tokens(tokens, min_freq),
            tag_index,
            settings,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::init_model;

    fn sample(seed: u64) -> Checkpoint {
        let vocab = Vocab::from_tokens(["le".to_string(), "Paris".into(), "a=b".into(), "é".into()], 2);
        let classes: BTreeSet<String> = ["LOC".to_string(), "PER".into()].into_iter().collect();
        let tag_index = TagIndex::from_classes(&classes);
        let config = ModelConfig {
            vocab_size: vocab.len(),
            d_model: 8,
            n_encoder_layers: 2,
            n_heads: 2,
            d_ffn: 12,
            max_len: 16,
            n_tags: tag_index.len(),
            dropout: 0.1,
            head_hidden: 6,
        };
        let mut params = init_model::<f32>(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in params.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-1.0f32..1.0));
        }
        Checkpoint {
            params,
            vocab,
            tag_index,
            settings: vec![("train.seed".into(), seed.to_string()), ("train.lr".into(), "0.001".into())],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample(3);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for (a, b) in c.params.params().iter().zip(back.params.params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let c = sample(4);
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(CheckpointError::Io(_))));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample(5).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..3]), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"ADNERCK2rest"), Err(CheckpointError::BadMagic)));
        for cut in [8, 11, 12, 100, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(CheckpointError::ChecksumMismatch)
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mut b = bytes.clone();
            let i = rng.gen_range(0..b.len());
            b[i] ^= 1 << rng.gen_range(0..8);
            let err = Checkpoint::from_bytes(&b).unwrap_err();
            if i < 8 {
                assert!(matches!(err, CheckpointError::BadMagic));
            } else {
                assert!(matches!(err, CheckpointError::ChecksumMismatch));
            }
        }
    }

    #[test]
    fn mismatched_tensors_are_shape_errors() {
        let c = sample(6);
        let mut bytes = c.to_bytes().unwrap();
        // Rewrite the embedded d_model and re-seal the checksum.
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let at = text.find("model.d_model = 8").unwrap() + "model.d_model = ".len();
        bytes[at] = b'4';
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::ShapeMismatch(_))));
    }

    #[test]
    fn reserved_setting_keys_are_rejected() {
        let mut c = sample(7);
        c.settings.push(("model.d_model".into(), "9".into()));
        assert!(c.to_bytes().is_err());
    }
}
