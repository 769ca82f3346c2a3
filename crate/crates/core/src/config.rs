//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{CorpusFormat, LabelSet, LoadOptions};
use crate::encoders::{EncoderConfig, EncoderVariant};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("{field}: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("{field} is required")]
    Missing { field: &'static str },
    #[error("{field}: {path} does not exist")]
    NotFound { field: &'static str, path: PathBuf },
    #[error("{path}: {reason}")]
    Read { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub format: CorpusFormat,
    pub label_set: LabelSet,
    pub max_bad_fraction: f64,
    pub variant: EncoderVariant,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub mlp_width: usize,
    pub dropout: f64,
    pub train_config: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: None,
            dev: None,
            test: None,
            embeddings: None,
            output_dir: PathBuf::from("run"),
            format: CorpusFormat::Jsonl,
            label_set: LabelSet::ThreeWay,
            max_bad_fraction: 0.0,
            variant: EncoderVariant::Hbmp,
            embed_dim: 300,
            hidden: 600,
            layers: 3,
            mlp_width: 600,
            dropout: 0.1,
            train_config: TrainConfig::default(),
        }
    }
}

/// Every accepted key, in rendering order.
pub const KEYS: [&str; 21] = [
    "train",
    "dev",
    "test",
    "embeddings",
    "output_dir",
    "format",
    "label_set",
    "max_bad_fraction",
    "variant",
    "embed_dim",
    "hidden",
    "layers",
    "mlp_width",
    "dropout",
    "lr",
    "decay",
    "batch_size",
    "patience",
    "max_epochs",
    "seed",
    "config_version",
];

fn parse<T: std::str::FromStr>(field: &'static str, value: &str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::Field {
        field,
        reason: format!("cannot parse {value:?}"),
    })
}

fn path_opt(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Relative corpus paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::parse_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train, &mut cfg.dev, &mut cfg.test, &mut cfg.embeddings].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train_config;
        match key {
            "train" => self.train = path_opt(value),
            "dev" => self.dev = path_opt(value),
            "test" => self.test = path_opt(value),
            "embeddings" => self.embeddings = path_opt(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "format" => self.format = parse("format", value)?,
            "label_set" => self.label_set = parse("label_set", value)?,
            "max_bad_fraction" => self.max_bad_fraction = parse("max_bad_fraction", value)?,
            "variant" => self.variant = parse("variant", value)?,
            "embed_dim" => self.embed_dim = parse("embed_dim", value)?,
            "hidden" => self.hidden = parse("hidden", value)?,
            "layers" => self.layers = parse("layers", value)?,
            "mlp_width" => self.mlp_width = parse("mlp_width", value)?,
            "dropout" => self.dropout = parse("dropout", value)?,
            "lr" => t.lr0 = parse("lr", value)?,
            "decay" => t.decay = parse("decay", value)?,
            "batch_size" => t.batch_size = parse("batch_size", value)?,
            "patience" => t.patience = parse("patience", value)?,
            "max_epochs" => t.max_epochs = parse("max_epochs", value)?,
            "seed" => t.seed = parse("seed", value)?,
            "config_version" => {
                if value != "1" {
                    return Err(ConfigError::Field {
                        field: "config_version",
                        reason: format!("unsupported version {value}"),
                    });
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: o.to_string() })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn value(&self, key: &str) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let t = &self.train_config;
        match key {
            "train" => opt(&self.train),
            "dev" => opt(&self.dev),
            "test" => opt(&self.test),
            "embeddings" => opt(&self.embeddings),
            "output_dir" => self.output_dir.display().to_string(),
            "format" => self.format.as_str().to_string(),
            "label_set" => self.label_set.to_string(),
            "max_bad_fraction" => self.max_bad_fraction.to_string(),
            "variant" => self.variant.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "layers" => self.layers.to_string(),
            "mlp_width" => self.mlp_width.to_string(),
            "dropout" => self.dropout.to_string(),
            "lr" => t.lr0.to_string(),
            "decay" => t.decay.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "patience" => t.patience.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "seed" => t.seed.to_string(),
            "config_version" => "1".to_string(),
            _ => panic!("unknown key {key}"),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.value(k));
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of the settings that shape results.
    /// Output locations are excluded so that moving a run keeps its hash.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|&&k| k != "output_dir") {
            h.update(format!("{k}={}\n", self.value(k)).as_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                variant: self.variant,
                vocab_size,
                embed_dim: self.embed_dim,
                hidden: self.hidden,
                layers: self.layers,
            },
            mlp_width: self.mlp_width,
            classes: self.label_set.len(),
            dropout: self.dropout,
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            format: self.format,
            label_set: self.label_set,
            max_bad_fraction: self.max_bad_fraction,
        }
    }

    /// Field-level checks; `for_training` also requires the corpus and embedding paths to exist.
    pub fn validate(&self, for_training: bool) -> Result<()> {
        let positive = |field: &'static str, v: usize| {
            if v == 0 {
                Err(ConfigError::Field {
                    field,
                    reason: "must be at least 1".into(),
                })
            } else {
                Ok(())
            }
        };
        positive("embed_dim", self.embed_dim)?;
        positive("hidden", self.hidden)?;
        positive("layers", self.layers)?;
        positive("mlp_width", self.mlp_width)?;
        positive("batch_size", self.train_config.batch_size)?;
        positive("patience", self.train_config.patience)?;
        positive("max_epochs", self.train_config.max_epochs)?;
        let in_range = |field: &'static str, v: f64, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Field {
                    field,
                    reason: format!("{v} is out of range"),
                })
            }
        };
        in_range("dropout", self.dropout, (0.0..1.0).contains(&self.dropout))?;
        in_range("lr", self.train_config.lr0, self.train_config.lr0 > 0.0 && self.train_config.lr0.is_finite())?;
        in_range("decay", self.train_config.decay, self.train_config.decay > 0.0 && self.train_config.decay < 1.0)?;
        in_range("max_bad_fraction", self.max_bad_fraction, (0.0..=1.0).contains(&self.max_bad_fraction))?;
        if for_training {
            for (field, p) in [("train", &self.train), ("dev", &self.dev), ("embeddings", &self.embeddings)] {
                let p = p.as_ref().ok_or(ConfigError::Missing { field })?;
                if !p.exists() {
                    return Err(ConfigError::NotFound { field, path: p.clone() });
                }
            }
            if let Some(p) = &self.test {
                if !p.exists() {
                    return Err(ConfigError::NotFound { field: "test", path: p.clone() });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.embed_dim, c.hidden, c.layers, c.mlp_width), (300, 600, 3, 600));
        assert_eq!(c.dropout, 0.1);
        let t = &c.train_config;
        assert_eq!((t.lr0, t.decay, t.batch_size, t.patience), (5e-4, 0.2, 64, 3));
    }

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.apply_overrides(["variant=ens-tied", "hidden = 32", "train=data/t.jsonl", "seed=7"]).unwrap();
        let back = RunConfig::parse_str(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn comments_and_errors() {
        let c = RunConfig::parse_str("# run\nhidden = 8  # small\n\nformat = tsv\n").unwrap();
        assert_eq!(c.hidden, 8);
        assert_eq!(c.format, CorpusFormat::Tsv);
        assert_eq!(RunConfig::parse_str("nonsense").unwrap_err(), ConfigError::Syntax { line: 1, text: "nonsense".into() });
        assert_eq!(RunConfig::parse_str("colour = red").unwrap_err(), ConfigError::UnknownKey("colour".into()));
        let err = RunConfig::parse_str("layers = three").unwrap_err();
        assert!(err.to_string().starts_with("layers:"), "{err}");
    }

    #[test]
    fn hash_tracks_results_not_locations() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.train_config.seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn validation_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x.jsonl");
        std::fs::write(&f, "").unwrap();
        let mut c = RunConfig {
            train: Some(f.clone()),
            dev: Some(f.clone()),
            ..RunConfig::default()
        };
        assert_eq!(c.validate(true).unwrap_err(), ConfigError::Missing { field: "embeddings" });
        c.embeddings = Some(dir.path().join("missing.txt"));
        assert!(c.validate(true).unwrap_err().to_string().starts_with("embeddings:"));
        c.embeddings = Some(f);
        c.validate(true).unwrap();
        c.dropout = 1.5;
        assert!(c.validate(false).unwrap_err().to_string().starts_with("dropout:"));
    }
}
