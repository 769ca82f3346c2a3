//! Siamese NLI model: one encoder shared by premise and hypothesis, then the classifier head.

use rand::{Rng, RngCore};

use crate::encoders::{encode, EncoderConfig, EncoderParams, EncoderVars};
use crate::nli_head::{classify, combine, HeadConfig, HeadParams, HeadVars};
use crate::recurrent::SentenceBatch;
use crate::tensor::{Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub mlp_width: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            embedding_width: self.encoder.output_width(),
            mlp_width: self.mlp_width,
            classes: self.classes,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliModel {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

impl NliModel {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let encoder = EncoderParams::init(&config.encoder, rng);
        let head = HeadParams::init(&config.head(), rng);
        Self { config, encoder, head }
    }

    pub fn zeros(config: ModelConfig) -> Self {
        Self {
            config,
            encoder: EncoderParams::zeros(&config.encoder),
            head: HeadParams::zeros(&config.head()),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.head.named_tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let vars: Vec<Var> = self.named_tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        self.bind(&vars)
    }

    /// Structures leaves given in [`named_tensors`](Self::named_tensors) order.
    pub fn bind(&self, vars: &[Var]) -> ModelVars {
        let mut it = vars.iter().copied();
        let encoder = self.encoder.bind(&mut it);
        let head = HeadParams::bind(&mut it);
        ModelVars { encoder, head }
    }

    /// Class logits `batch×C`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        premises: &SentenceBatch,
        hypotheses: &SentenceBatch,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let u = encode(tape, &vars.encoder, &self.config.encoder, premises)?;
        let v = encode(tape, &vars.encoder, &self.config.encoder, hypotheses)?;
        let features = combine(tape, u, v)?;
        let dropout = dropout_rng.map(|rng| (rng, self.config.dropout));
        classify(tape, features, &vars.head, dropout)
    }

    /// Deterministic class probabilities for a batch, row-major `batch×C`.
    pub fn probabilities(&self, premises: &SentenceBatch, hypotheses: &SentenceBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.named_tensors().into_iter().map(|(_, t)| tape.constant(t.clone())).collect();
        let vars = self.bind(&vars);
        let logits = self.logits(&mut tape, &vars, premises, hypotheses, None)?;
        let value = tape.value(logits);
        let probs = crate::tensor::softmax_rows(value.data(), self.config.classes);
        Tensor::new(value.shape().to_vec(), probs)
    }
}
