//! Adam, the plateau schedule and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::analysis::{predict, AnalysisError};
use crate::checkpoint::{save_model, CheckpointError, ConfigBlock};
use crate::data::{batch_iter, DataError, EncodedDataset, LabelSet};
use crate::model::{ModelConfig, NliModel};
use crate::recurrent::PAD_ID;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in '{name}' at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("non-finite training loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{what} has {found} classes, expected {expected}")]
    LabelSet { what: &'static str, expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates for every parameter tensor, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
            lr,
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter moves, so a failed step leaves parameters and state untouched.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&[f64]], names: &[String], state: &mut AdamState) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        assert_eq!(p.numel(), g.len(), "gradient shape mirrors '{name}'");
        if !g.iter().all(|x| x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                name: name.clone(),
                step: state.t + 1,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x -= state.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpochDecision {
    Continue,
    DecayLr,
    Stop,
}

/// Decays the rate after every epoch whose dev loss fails to beat the best so
/// far, and stops once more than `patience` such epochs have run in a row.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub patience: usize,
    best: Option<f64>,
    stale: usize,
    decays: i32,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, decay: f64, patience: usize) -> Self {
        Self {
            lr0,
            decay,
            patience,
            best: None,
            stale: 0,
            decays: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr0 * self.decay.powi(self.decays)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best
    }

    pub fn epoch_end(&mut self, dev_loss: f64) -> EpochDecision {
        if self.best.is_none_or(|b| dev_loss < b) {
            self.best = Some(dev_loss);
            self.stale = 0;
            return EpochDecision::Continue;
        }
        self.stale += 1;
        self.decays += 1;
        if self.stale > self.patience {
            EpochDecision::Stop
        } else {
            EpochDecision::DecayLr
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            decay: 0.2,
            batch_size: 64,
            patience: 3,
            max_epochs: 20,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad("decay must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
    /// Rate used during the epoch.
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    DevLossPlateau,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub best_model: NliModel,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

/// Tab-separated epoch log with `#`-prefixed metadata lines first.
pub fn render_epoch_log(meta: &ConfigBlock, epochs: &[EpochRecord]) -> String {
    let mut out = String::new();
    for (k, v) in &meta.entries {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str("epoch\ttrain_loss\tdev_loss\tdev_accuracy\tlr\n");
    for e in epochs {
        let _ = writeln!(out, "{}\t{:.9}\t{:.9}\t{:.6}\t{:e}", e.epoch, e.train_loss, e.dev_loss, e.dev_accuracy, e.lr);
    }
    out
}

/// Where [`fit`] writes its artifacts, and the metadata stamped into each.
#[derive(Clone, Debug)]
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    pub meta: &'a ConfigBlock,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const EPOCH_LOG: &str = "epochs.tsv";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Freshly initialised model, optionally with pretrained embedding rows.
pub fn initial_model(config: ModelConfig, embeddings: Option<&Tensor>, seed: u64) -> Result<NliModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NliModel::init(config, &mut rng);
    if let Some(table) = embeddings {
        if table.shape() != model.encoder.embedding.shape() {
            return Err(TrainError::Tensor(TensorError::Shape {
                op: "pretrained embeddings",
                left: model.encoder.embedding.shape().to_vec(),
                right: table.shape().to_vec(),
            }));
        }
        model.encoder.embedding = table.clone();
        let e = config.encoder.embed_dim;
        model.encoder.embedding.data_mut()[PAD_ID * e..(PAD_ID + 1) * e].fill(0.0);
    }
    Ok(model)
}

/// Trains `model` on `train`, evaluating on `dev` after every epoch. The
/// returned model is the epoch with the highest dev accuracy, ties going to
/// the lower dev loss.
pub fn fit(mut model: NliModel, train: &EncodedDataset, dev: &EncodedDataset, label_set: LabelSet, config: &TrainConfig, output: Option<RunOutput<'_>>) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::Data(DataError::EmptyDataset));
    }
    if model.config.classes != label_set.len() {
        return Err(TrainError::LabelSet {
            what: "model",
            expected: label_set.len(),
            found: model.config.classes,
        });
    }
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::new(&model.named_tensors().into_iter().map(|(_, t)| t).collect::<Vec<_>>(), config.lr0);
    let mut schedule = PlateauSchedule::new(config.lr0, config.decay, config.patience);
    // independent streams so that changing one consumer leaves the others intact
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4452_4f50);

    let mut epochs = Vec::new();
    let mut best: Option<(NliModel, usize, f64, f64)> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr();
        adam.lr = lr;
        let mut loss_sum = 0.0;
        for (b, batch) in batch_iter(train, config.batch_size, Some(shuffle_rng.next_u64()))?.enumerate() {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = model.named_tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
            let vars = model.bind(&leaves);
            let logits = model.logits(&mut tape, &vars, &batch.premises, &batch.hypotheses, Some(&mut dropout_rng))?;
            let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += value * batch.labels.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = leaves.iter().map(|&v| tape.grad_tensor(v)).collect();
            let grad_slices: Vec<&[f64]> = grads.iter().map(Tensor::data).collect();
            adam_step(&mut model.tensors_mut(), &grad_slices, &names, &mut adam)?;
        }
        let train_loss = loss_sum / train.len() as f64;

        let preds = predict(&model, dev, config.batch_size)?;
        let dev_loss = preds.mean_loss();
        let dev_accuracy = preds.accuracy(&dev.labels);
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_accuracy,
            lr,
        });
        log::info!("epoch {epoch}: train loss {train_loss:.4}, dev loss {dev_loss:.4}, dev acc {dev_accuracy:.4}, lr {lr:e}");

        let improved = best
            .as_ref()
            .is_none_or(|&(_, _, acc, loss)| dev_accuracy > acc || (dev_accuracy == acc && dev_loss < loss));
        if improved {
            best = Some((model.clone(), epoch, dev_accuracy, dev_loss));
        }
        if let Some(out) = &output {
            let mut meta = out.meta.clone();
            meta.set("epoch", epoch);
            meta.set("adam_step", adam.t);
            save_model(&out.dir.join(LAST_CHECKPOINT), &model, &meta)?;
            if improved {
                save_model(&out.dir.join(BEST_CHECKPOINT), &model, &meta)?;
            }
            write_file(&out.dir.join(EPOCH_LOG), &render_epoch_log(out.meta, &epochs))?;
        }

        match schedule.epoch_end(dev_loss) {
            EpochDecision::Stop => {
                stop_reason = StopReason::DevLossPlateau;
                break;
            }
            EpochDecision::DecayLr => log::info!("dev loss did not improve; lr now {:e}", schedule.lr()),
            EpochDecision::Continue => {}
        }
    }
    let (best_model, best_epoch, _, _) = best.expect("at least one epoch ran");
    Ok(FitResult {
        best_model,
        best_epoch,
        best_checkpoint: output.map(|o| o.dir.join(BEST_CHECKPOINT)),
        epochs,
        stop_reason,
    })
}
