use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hbmp_core::analysis::BootstrapSpec;
use hbmp_core::config::RunConfig;
use hbmp_core::data::{CorpusFormat, LabelSet};
use hbmp_core::diagnostics::GradcheckDims;
use hbmp_core::encoders::EncoderVariant;
use hbmp_core::synth::SynthSpec;
use hbmp_core::workflow::{self, EvalOptions, WorkflowError};

/// Train and evaluate hierarchical BiLSTM max-pooling NLI models.
#[derive(Parser)]
#[command(name = "hbmp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Accuracy per annotation tag and gold label.
    Analyze(AnalyzeArgs),
    /// Compare analytic and finite-difference gradients at tiny dimensions.
    Gradcheck(GradcheckArgs),
    /// Write the seeded synthetic corpus, embeddings and a run config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` file; keys mirror the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    dev: Option<String>,
    #[arg(long)]
    test: Option<String>,
    #[arg(long)]
    embeddings: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
    /// jsonl or tsv [default: jsonl]
    #[arg(long)]
    format: Option<String>,
    /// three-way or two-way [default: three-way]
    #[arg(long)]
    label_set: Option<String>,
    /// hbmp, ens, ens-train, ens-tied or stack [default: hbmp]
    #[arg(long)]
    variant: Option<String>,
    /// Word vector width [default: 300]
    #[arg(long)]
    embed_dim: Option<String>,
    /// Hidden units per direction [default: 600]
    #[arg(long)]
    hidden: Option<String>,
    /// BiLSTM layers [default: 3]
    #[arg(long)]
    layers: Option<String>,
    /// Classifier hidden width [default: 600]
    #[arg(long)]
    mlp_width: Option<String>,
    /// Dropout after the first two classifier layers [default: 0.1]
    #[arg(long)]
    dropout: Option<String>,
    /// Initial learning rate [default: 5e-4]
    #[arg(long)]
    lr: Option<String>,
    /// Learning-rate factor after a non-improving epoch [default: 0.2]
    #[arg(long)]
    decay: Option<String>,
    /// [default: 64]
    #[arg(long)]
    batch_size: Option<String>,
    /// Non-improving epochs tolerated before stopping [default: 3]
    #[arg(long)]
    patience: Option<String>,
    /// [default: 20]
    #[arg(long)]
    max_epochs: Option<String>,
    /// [default: 1234]
    #[arg(long)]
    seed: Option<String>,
}

impl TrainArgs {
    fn flag_overrides(&self) -> Vec<String> {
        let flags = [
            ("train", &self.train),
            ("dev", &self.dev),
            ("test", &self.test),
            ("embeddings", &self.embeddings),
            ("output_dir", &self.output_dir),
            ("format", &self.format),
            ("label_set", &self.label_set),
            ("variant", &self.variant),
            ("embed_dim", &self.embed_dim),
            ("hidden", &self.hidden),
            ("layers", &self.layers),
            ("mlp_width", &self.mlp_width),
            ("dropout", &self.dropout),
            ("lr", &self.lr),
            ("decay", &self.decay),
            ("batch_size", &self.batch_size),
            ("patience", &self.patience),
            ("max_epochs", &self.max_epochs),
            ("seed", &self.seed),
        ];
        flags
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| format!("{k}={v}")))
            .chain(self.overrides.iter().cloned())
            .collect()
    }
}

#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Defaults to the format the checkpoint was trained on.
    #[arg(long)]
    format: Option<CorpusFormat>,
    /// Must match the checkpoint when given.
    #[arg(long)]
    label_set: Option<LabelSet>,
    /// Tolerated fraction of malformed rows.
    #[arg(long, default_value_t = 0.0)]
    max_bad_fraction: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Directory for report files.
    #[arg(long)]
    report_dir: Option<PathBuf>,
}

impl CorpusArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            format: self.format,
            label_set: self.label_set,
            max_bad_fraction: self.max_bad_fraction,
            batch_size: self.batch_size,
            report_dir: self.report_dir.clone(),
            ..EvalOptions::default()
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Percentile bootstrap interval from SAMPLES resamples of SIZE pairs.
    #[arg(long, num_args = 2, value_names = ["SAMPLES", "SIZE"])]
    bootstrap: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    bootstrap_seed: u64,
    /// Also write index/gold/predicted rows to predictions.tsv.
    #[arg(long)]
    predictions: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "hbmp")]
    variant: EncoderVariant,
    /// Check every encoder variant.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 7)]
    vocab: usize,
    #[arg(long, default_value_t = 4)]
    embed: usize,
    #[arg(long, default_value_t = 3)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    max_len: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long, default_value_t = 60)]
    dev_pairs: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 2018)]
    seed: u64,
}

fn train(args: &TrainArgs) -> Result<bool> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).map_err(WorkflowError::from)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(args.flag_overrides().iter().map(String::as_str)).map_err(WorkflowError::from)?;
    let out = workflow::cmd_train(&cfg)?;
    let best = &out.fit.epochs[out.fit.best_epoch - 1];
    println!(
        "best epoch {} dev accuracy {:.2}% ({} epochs, {:?}); checkpoint {}",
        out.fit.best_epoch,
        100.0 * best.dev_accuracy,
        out.fit.epochs.len(),
        out.fit.stop_reason,
        out.fit.best_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(true)
}

fn eval(args: &EvalArgs) -> Result<bool> {
    let mut opts = args.corpus.options();
    opts.write_predictions = args.predictions;
    opts.bootstrap = args.bootstrap.as_ref().map(|b| BootstrapSpec {
        samples: b[0],
        sample_size: b[1],
        seed: args.bootstrap_seed,
        ..BootstrapSpec::default()
    });
    let report = workflow::cmd_eval(&args.corpus.checkpoint, &args.corpus.corpus, &opts)?;
    print!("{}", report.render());
    Ok(true)
}

fn analyze(args: &AnalyzeArgs) -> Result<bool> {
    let table = workflow::cmd_analyze(&args.corpus.checkpoint, &args.corpus.corpus, &args.corpus.options())?;
    print!("{}", table.render());
    Ok(true)
}

fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let dims = GradcheckDims {
        vocab: args.vocab,
        embed: args.embed,
        hidden: args.hidden,
        layers: args.layers,
        max_len: args.max_len,
        batch: args.batch,
        ..GradcheckDims::default()
    };
    let variants = if args.all { EncoderVariant::ALL.to_vec() } else { vec![args.variant] };
    let outcomes = workflow::cmd_gradcheck(&variants, &dims, args.seed, args.inject_fault)?;
    for o in &outcomes {
        print!("{}", o.render());
    }
    Ok(outcomes.iter().all(|o| o.passed()))
}

fn synth(args: &SynthArgs) -> Result<bool> {
    let spec = SynthSpec {
        train_pairs: args.pairs,
        dev_pairs: args.dev_pairs,
        embed_dim: args.embed_dim,
        seed: args.seed,
    };
    let cfg = workflow::cmd_synth(&args.out, &spec).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {}", cfg.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<WorkflowError>().is_some_and(WorkflowError::is_config);
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
