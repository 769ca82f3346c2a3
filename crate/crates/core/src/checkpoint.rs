//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"HBMP"  u32 version
//! u32 len  UTF-8 "key=value\n" lines
//! per tensor: u32 name_len, name, u32 rank, rank × u64 dims, f32 values (row-major)
//! ```
//!
//! The config block always carries `tensors=<count>`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::encoders::{EncoderConfig, EncoderVariant};
use crate::model::{ModelConfig, NliModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HBMP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor '{name}': checkpoint has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor '{name}' expected at position {index} but checkpoint has '{found}'")]
    NameMismatch { index: usize, name: String, found: String },
    #[error("checkpoint holds {found} tensors, model expects {expected}")]
    TensorCount { expected: usize, found: usize },
    #[error("config key '{0}' missing")]
    MissingKey(String),
    #[error("config key '{key}': cannot parse '{value}'")]
    BadValue { key: String, value: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// Ordered `key=value` metadata.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigBlock {
    pub entries: Vec<(String, String)>,
}

impl ConfigBlock {
    /// Replaces an existing key in place or appends a new one.
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        assert!(!key.contains(['=', '\n']) && !value.contains('\n'), "config entries are single-line key=value");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| CheckpointError::MissingKey(key.to_string()))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let value = self.require(key)?;
        value.parse().map_err(|_| CheckpointError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        })
    }

    fn encode(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn decode(text: &str) -> Result<Self> {
        let mut block = Self::default();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("config line without '=': {line:?}")))?;
            block.entries.push((k.to_string(), v.to_string()));
        }
        Ok(block)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ConfigBlock,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn encode_checkpoint(config: &ConfigBlock, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut config = config.clone();
    config.set("tensors", tensors.len());
    let text = config.encode();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, config: &ConfigBlock, tensors: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode_checkpoint(config, tensors);
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    f.sync_all().map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let mut buf = self.bytes;
        if buf.len() < n {
            return Err(CheckpointError::Truncated(what.to_string()));
        }
        let (head, rest) = buf.split_at(n);
        buf = rest;
        self.bytes = buf;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let len = cur.u32("config length")? as usize;
    let config = ConfigBlock::decode(&cur.utf8(len, "config block")?)?;
    let count: usize = config.parse("tensors")?;

    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("tensor {i}");
        let name_len = cur.u32(&what)? as usize;
        let name = cur.utf8(name_len, &what)?;
        let what = format!("tensor '{name}'");
        let rank = cur.u32(&what)? as usize;
        let shape = (0..rank).map(|_| cur.u64(&what).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= cur.bytes.len()))
            .ok_or_else(|| CheckpointError::Truncated(what.clone()))?;
        let data: Vec<f64> = cur
            .take(numel * 4, &what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{what}: {e}")))?;
        tensors.push((name, t));
    }
    if !cur.bytes.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", cur.bytes.len())));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode_checkpoint(&bytes)
}

/// Writes the model's shape-defining hyperparameters into `block`.
pub fn describe_model(block: &mut ConfigBlock, config: &ModelConfig) {
    let e = &config.encoder;
    block.set("variant", e.variant);
    block.set("vocab_size", e.vocab_size);
    block.set("embed_dim", e.embed_dim);
    block.set("hidden", e.hidden);
    block.set("layers", e.layers);
    block.set("mlp_width", config.mlp_width);
    block.set("classes", config.classes);
    block.set("dropout", config.dropout);
}

pub fn model_config(block: &ConfigBlock) -> Result<ModelConfig> {
    let variant: EncoderVariant = block.parse("variant")?;
    Ok(ModelConfig {
        encoder: EncoderConfig {
            variant,
            vocab_size: block.parse("vocab_size")?,
            embed_dim: block.parse("embed_dim")?,
            hidden: block.parse("hidden")?,
            layers: block.parse("layers")?,
        },
        mlp_width: block.parse("mlp_width")?,
        classes: block.parse("classes")?,
        dropout: block.parse("dropout")?,
    })
}

pub fn save_model(path: &Path, model: &NliModel, extra: &ConfigBlock) -> Result<()> {
    let mut block = extra.clone();
    describe_model(&mut block, &model.config);
    save_checkpoint(path, &block, &model.named_tensors())
}

/// Copies checkpoint tensors into `model`, checking names and shapes in order.
pub fn load_into(model: &mut NliModel, checkpoint: &Checkpoint) -> Result<()> {
    let names: Vec<(String, Vec<usize>)> = model.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if names.len() != checkpoint.tensors.len() {
        // report the first structural difference rather than only the count
        if let Some((index, ((name, _), (found, _)))) = names.iter().zip(&checkpoint.tensors).enumerate().find(|(_, ((a, _), (b, _)))| a != b) {
            return Err(CheckpointError::NameMismatch {
                index,
                name: name.clone(),
                found: found.clone(),
            });
        }
        return Err(CheckpointError::TensorCount {
            expected: names.len(),
            found: checkpoint.tensors.len(),
        });
    }
    for (index, ((name, shape), (found, t))) in names.iter().zip(&checkpoint.tensors).enumerate() {
        if name != found {
            return Err(CheckpointError::NameMismatch {
                index,
                name: name.clone(),
                found: found.clone(),
            });
        }
        if shape != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    for (dst, (_, src)) in model.tensors_mut().into_iter().zip(&checkpoint.tensors) {
        *dst = src.clone();
    }
    Ok(())
}

/// Rebuilds a model from the hyperparameters and tensors stored in the file.
pub fn load_model(path: &Path) -> Result<(NliModel, ConfigBlock)> {
    let ckpt = load_checkpoint(path)?;
    let config = model_config(&ckpt.config)?;
    let mut model = NliModel::zeros(config);
    load_into(&mut model, &ckpt)?;
    Ok((model, ckpt.config))
}
