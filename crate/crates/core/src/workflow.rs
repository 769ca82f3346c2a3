//! End-to-end commands: train, eval, analyze, gradcheck and synth.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use crate::analysis::{bootstrap_ci, category_breakdown, evaluate, AnalysisError, BootstrapSpec, CategoryTable, EvalReport};
use crate::checkpoint::{load_model, CheckpointError, ConfigBlock};
use crate::config::{ConfigError, RunConfig};
use crate::data::{build_vocab, load_corpus, load_embeddings, CorpusFormat, DataError, EncodedDataset, LabelSet, LoadOptions, Vocabulary};
use crate::diagnostics::{gradcheck_model, GradcheckDims, GradcheckOutcome};
use crate::encoders::EncoderVariant;
use crate::model::NliModel;
use crate::synth::{write_synthetic, SynthSpec};
use crate::tensor::TensorError;
use crate::training::{fit, initial_model, FitResult, RunOutput, TrainError};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint was trained on the {checkpoint} label set but {requested} was requested")]
    LabelSetMismatch { checkpoint: LabelSet, requested: LabelSet },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WorkflowError {
    /// Errors in the user's configuration, as opposed to failures while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_) | Self::LabelSetMismatch { .. })
    }
}

pub type Result<T> = std::result::Result<T, WorkflowError>;

pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.txt";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const CATEGORIES_FILE: &str = "categories.txt";
pub const RESOLVED_CONFIG: &str = "run.cfg";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| WorkflowError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| WorkflowError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json(value: &serde_json::Value) -> String {
    serde_json::to_string_pretty(value).expect("plain JSON values serialise") + "\n"
}

/// Metadata stamped into every artifact of a training run.
fn run_meta(cfg: &RunConfig, vocab: &Vocabulary) -> ConfigBlock {
    let mut meta = ConfigBlock::default();
    meta.set("config_hash", cfg.hash());
    meta.set("seed", cfg.train_config.seed);
    meta.set("label_set", cfg.label_set);
    meta.set("format", cfg.format.as_str());
    meta.set("vocab", vocab.tokens().join(" "));
    meta
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub fit: FitResult,
    pub vocab: Vocabulary,
    pub config_hash: String,
    pub embedding_coverage: f64,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate(true)?;
    let opts = cfg.load_options();
    let field = |p: &Option<PathBuf>| p.clone().expect("validated");
    let train = load_corpus(&field(&cfg.train), &opts)?;
    let dev = load_corpus(&field(&cfg.dev), &opts)?;
    let test = cfg.test.as_ref().map(|p| load_corpus(p, &opts)).transpose()?;
    let mut splits = vec![&train, &dev];
    splits.extend(test.as_ref());
    let vocab = build_vocab(&splits);
    let embeddings = load_embeddings(&field(&cfg.embeddings), &vocab, cfg.embed_dim)?;
    let coverage = embeddings.coverage(&vocab);
    log::info!(
        "{} train / {} dev examples, vocabulary {}, embedding coverage {:.1}%",
        train.len(),
        dev.len(),
        vocab.len(),
        100.0 * coverage
    );

    let model = initial_model(cfg.model_config(vocab.len()), Some(&embeddings.table), cfg.train_config.seed)?;
    let meta = run_meta(cfg, &vocab);
    fs::create_dir_all(&cfg.output_dir).map_err(|source| WorkflowError::Io {
        path: cfg.output_dir.clone(),
        source,
    })?;
    write(&cfg.output_dir.join(RESOLVED_CONFIG), cfg.render())?;
    let result = fit(
        model,
        &EncodedDataset::new(&train, &vocab),
        &EncodedDataset::new(&dev, &vocab),
        cfg.label_set,
        &cfg.train_config,
        Some(RunOutput {
            dir: &cfg.output_dir,
            meta: &meta,
        }),
    )?;

    let best = &result.epochs[result.best_epoch - 1];
    let metrics = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.train_config.seed,
        "variant": cfg.variant.as_str(),
        "epochs_run": result.epochs.len(),
        "best_epoch": result.best_epoch,
        "best_dev_accuracy": best.dev_accuracy,
        "best_dev_loss": best.dev_loss,
        "stop_reason": format!("{:?}", result.stop_reason),
        "embedding_coverage": coverage,
        "skipped_no_consensus": train.skipped_no_consensus + dev.skipped_no_consensus,
    });
    write(&cfg.output_dir.join(METRICS_FILE), to_json(&metrics))?;
    Ok(TrainOutcome {
        fit: result,
        vocab,
        config_hash: cfg.hash(),
        embedding_coverage: coverage,
    })
}

/// A checkpoint together with the vocabulary and labels it was trained with.
pub struct LoadedRun {
    pub model: NliModel,
    pub vocab: Vocabulary,
    pub label_set: LabelSet,
    pub meta: ConfigBlock,
}

pub fn load_run(checkpoint: &Path) -> Result<LoadedRun> {
    let (model, meta) = load_model(checkpoint)?;
    let vocab_line = meta.require("vocab")?;
    // the first two entries are the reserved pad and unknown tokens
    let vocab = Vocabulary::from_tokens(vocab_line.split(' ').skip(2));
    let label_set: LabelSet = meta.require("label_set")?.parse()?;
    if vocab.len() != model.config.encoder.vocab_size {
        return Err(CheckpointError::Malformed(format!(
            "vocabulary has {} entries but the embedding table has {} rows",
            vocab.len(),
            model.config.encoder.vocab_size
        ))
        .into());
    }
    Ok(LoadedRun {
        model,
        vocab,
        label_set,
        meta,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub format: Option<CorpusFormat>,
    pub label_set: Option<LabelSet>,
    pub max_bad_fraction: f64,
    pub batch_size: usize,
    pub bootstrap: Option<BootstrapSpec>,
    pub report_dir: Option<PathBuf>,
    pub write_predictions: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            format: None,
            label_set: None,
            max_bad_fraction: 0.0,
            batch_size: 64,
            bootstrap: None,
            report_dir: None,
            write_predictions: false,
        }
    }
}

fn corpus_for(run: &LoadedRun, corpus: &Path, opts: &EvalOptions) -> Result<(EncodedDataset, LabelSet)> {
    if let Some(requested) = opts.label_set.filter(|&l| l != run.label_set) {
        return Err(WorkflowError::LabelSetMismatch {
            checkpoint: run.label_set,
            requested,
        });
    }
    let format = match opts.format {
        Some(f) => f,
        None => run.meta.require("format")?.parse()?,
    };
    let load = LoadOptions {
        format,
        label_set: run.label_set,
        max_bad_fraction: opts.max_bad_fraction,
    };
    let data = load_corpus(corpus, &load)?;
    Ok((EncodedDataset::new(&data, &run.vocab), run.label_set))
}

fn stamp(run: &LoadedRun) -> (String, String) {
    (
        run.meta.get("config_hash").unwrap_or("").to_string(),
        run.meta.get("seed").unwrap_or("").to_string(),
    )
}

pub fn cmd_eval(checkpoint: &Path, corpus: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let run = load_run(checkpoint)?;
    let (data, label_set) = corpus_for(&run, corpus, opts)?;
    let (mut report, preds) = evaluate(&run.model, &data, label_set, opts.batch_size)?;
    if let Some(spec) = &opts.bootstrap {
        report.confidence_interval = Some(bootstrap_ci(&preds.correct(&data.labels), spec)?);
    }
    if let Some(dir) = &opts.report_dir {
        let (hash, seed) = stamp(&run);
        let mut metrics = serde_json::to_value(&report).expect("report serialises");
        metrics["config_hash"] = json!(hash);
        metrics["seed"] = json!(seed);
        metrics["corpus"] = json!(corpus.display().to_string());
        write(&dir.join(METRICS_FILE), to_json(&metrics))?;
        write(&dir.join(REPORT_FILE), format!("# config_hash={hash} seed={seed}\n{}", report.render()))?;
        if opts.write_predictions {
            write(&dir.join(PREDICTIONS_FILE), preds.to_tsv(&data.labels, label_set.names()))?;
        }
    }
    Ok(report)
}

pub fn cmd_analyze(checkpoint: &Path, corpus: &Path, opts: &EvalOptions) -> Result<CategoryTable> {
    let run = load_run(checkpoint)?;
    let (data, label_set) = corpus_for(&run, corpus, opts)?;
    let (_, preds) = evaluate(&run.model, &data, label_set, opts.batch_size)?;
    let table = category_breakdown(label_set.names(), &data.labels, &preds.predicted, &data.annotations)?;
    if let Some(dir) = &opts.report_dir {
        let (hash, seed) = stamp(&run);
        write(&dir.join(CATEGORIES_FILE), format!("# config_hash={hash} seed={seed}\n{}", table.render()))?;
        let mut doc = serde_json::to_value(&table).expect("table serialises");
        doc["config_hash"] = json!(hash);
        doc["seed"] = json!(seed);
        write(&dir.join("categories.json"), to_json(&doc))?;
    }
    Ok(table)
}

pub fn cmd_gradcheck(variants: &[EncoderVariant], dims: &GradcheckDims, seed: u64, corrupt_backward: bool) -> Result<Vec<GradcheckOutcome>> {
    variants
        .iter()
        .map(|&v| gradcheck_model(v, dims, seed, corrupt_backward).map_err(WorkflowError::from))
        .collect()
}

/// Writes the synthetic corpus plus a ready-to-train config sized for a desk run.
pub fn cmd_synth(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    let files = write_synthetic(dir, spec).map_err(|source| WorkflowError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let name = |p: &Path| p.file_name().expect("generated file").to_string_lossy().into_owned();
    let mut cfg = RunConfig::default();
    cfg.train = Some(PathBuf::from(name(&files.train)));
    cfg.dev = Some(PathBuf::from(name(&files.dev)));
    cfg.embeddings = Some(PathBuf::from(name(&files.embeddings)));
    cfg.output_dir = PathBuf::from("run");
    cfg.embed_dim = spec.embed_dim;
    cfg.hidden = 32;
    cfg.mlp_width = 64;
    cfg.train_config.max_epochs = 50;
    let path = dir.join(RESOLVED_CONFIG);
    write(&path, cfg.render())?;
    Ok(path)
}
