//! Sentence encoders built from BiLSTM max-pooling layers.
//!
//! All variants run `L` BiLSTM layers, max-pool each layer's output over
//! time and concatenate the pooled vectors, so every encoder emits an
//! `L·2H` sentence embedding. They differ in what each layer reads and how
//! its state is initialised:
//!
//! | variant     | layer input          | initial state                   | weights    |
//! |-------------|----------------------|---------------------------------|------------|
//! | `hbmp`      | word embeddings      | previous layer's final states   | per layer  |
//! | `ens`       | word embeddings      | zeros                           | per layer  |
//! | `ens-train` | word embeddings      | learned, broadcast over batch   | per layer  |
//! | `ens-tied`  | word embeddings      | zeros                           | shared     |
//! | `stack`     | previous layer's out | zeros                           | per layer  |

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::recurrent::{bilstm, temporal_max_pool, BiLstmOutput, BiLstmParams, BiLstmVars, LstmVars, SentenceBatch, StatePair, PAD_ID};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderVariant {
    Hbmp,
    Ens,
    EnsTrain,
    EnsTied,
    Stack,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 5] = [Self::Hbmp, Self::Ens, Self::EnsTrain, Self::EnsTied, Self::Stack];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hbmp => "hbmp",
            Self::Ens => "ens",
            Self::EnsTrain => "ens-train",
            Self::EnsTied => "ens-tied",
            Self::Stack => "stack",
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown encoder variant `{s}` (expected one of hbmp, ens, ens-train, ens-tied, stack)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden size per direction.
    pub hidden: usize,
    pub layers: usize,
}

impl EncoderConfig {
    pub fn output_width(&self) -> usize {
        self.layers * 2 * self.hidden
    }

    fn stored_layers(&self) -> usize {
        if self.variant == EncoderVariant::EnsTied {
            1
        } else {
            self.layers
        }
    }

    fn layer_input(&self, k: usize) -> usize {
        if self.variant == EncoderVariant::Stack && k > 0 {
            2 * self.hidden
        } else {
            self.embed_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(TensorError::Invalid {
                op: "encoder_config",
                reason: format!("{name} must be positive"),
            }),
            None => Ok(()),
        }
    }
}

/// Learned initial states of one Ens-Train layer, each `1×H`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInit {
    pub fwd_h: Tensor,
    pub fwd_c: Tensor,
    pub bwd_h: Tensor,
    pub bwd_c: Tensor,
}

impl LayerInit {
    fn zeros(hidden: usize) -> Self {
        let z = Tensor::zeros(&[1, hidden]);
        Self {
            fwd_h: z.clone(),
            fwd_c: z.clone(),
            bwd_h: z.clone(),
            bwd_c: z,
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [("fwd.h", &self.fwd_h), ("fwd.c", &self.fwd_c), ("bwd.h", &self.bwd_h), ("bwd.c", &self.bwd_c)]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.fwd_h, &mut self.fwd_c, &mut self.bwd_h, &mut self.bwd_c]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `V×E`; row [`PAD_ID`] stays zero.
    pub embedding: Tensor,
    /// `L` entries, or one for `ens-tied`.
    pub layers: Vec<BiLstmParams>,
    /// Present only for `ens-train`.
    pub init_states: Option<Vec<LayerInit>>,
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let layers = (0..config.stored_layers())
            .map(|k| BiLstmParams::zeros(config.layer_input(k), config.hidden))
            .collect();
        let init_states = (config.variant == EncoderVariant::EnsTrain)
            .then(|| (0..config.layers).map(|_| LayerInit::zeros(config.hidden)).collect());
        Self {
            embedding: Tensor::zeros(&[config.vocab_size, config.embed_dim]),
            layers,
            init_states,
        }
    }

    /// Random embeddings in `(-0.1, 0.1)` (pad row zero), standard LSTM init,
    /// zero learned initial states.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let e = config.embed_dim;
        for (i, x) in p.embedding.data_mut().iter_mut().enumerate() {
            if i / e != PAD_ID {
                *x = rng.gen_range(-0.1..0.1);
            }
        }
        p.layers = (0..config.stored_layers())
            .map(|k| BiLstmParams::init(config.layer_input(k), config.hidden, rng))
            .collect();
        p
    }

    /// Every trainable tensor with a stable name, in registration order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("encoder.embedding".to_string(), &self.embedding)];
        for (k, layer) in self.layers.iter().enumerate() {
            for (dir, p) in [("fwd", &layer.forward), ("bwd", &layer.backward)] {
                for (name, t) in p.tensors() {
                    out.push((format!("encoder.layer{k}.{dir}.{name}"), t));
                }
            }
        }
        for (k, init) in self.init_states.iter().flatten().enumerate() {
            for (name, t) in init.tensors() {
                out.push((format!("encoder.init{k}.{name}"), t));
            }
        }
        out
    }

    /// Mutable counterpart of [`named_tensors`](Self::named_tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            for p in [&mut layer.forward, &mut layer.backward] {
                out.extend(p.tensors_mut().into_iter().map(|(_, t)| t));
            }
        }
        for init in self.init_states.iter_mut().flatten() {
            out.extend(init.tensors_mut());
        }
        out
    }

    /// Records every tensor as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        let vars: Vec<Var> = self.named_tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        self.bind(&mut vars.into_iter())
    }

    /// Structures leaves produced in [`named_tensors`](Self::named_tensors) order.
    pub fn bind(&self, vars: &mut impl Iterator<Item = Var>) -> EncoderVars {
        let mut next = || vars.next().expect("one var per encoder tensor");
        let embedding = next();
        let mut lstm = || LstmVars {
            w_x: next(),
            w_h: next(),
            b: next(),
        };
        let layers = self
            .layers
            .iter()
            .map(|_| BiLstmVars {
                forward: lstm(),
                backward: lstm(),
            })
            .collect();
        let init_states = self.init_states.as_ref().map(|inits| {
            inits
                .iter()
                .map(|_| {
                    let mut next = || vars.next().expect("one var per encoder tensor");
                    [next(), next(), next(), next()]
                })
                .collect()
        });
        EncoderVars {
            embedding,
            layers,
            init_states,
        }
    }
}

/// [`EncoderParams`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub embedding: Var,
    pub layers: Vec<BiLstmVars>,
    /// `[fwd.h, fwd.c, bwd.h, bwd.c]` per layer.
    pub init_states: Option<Vec<[Var; 4]>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Start every HBMP layer from zero states instead of the previous
    /// layer's final states.
    pub zero_handoff: bool,
}

/// Everything an encoder pass produced.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub embedded: Vec<Var>,
    pub layer_outputs: Vec<BiLstmOutput>,
    pub pooled: Vec<Var>,
    /// `batch×L·2H` sentence embedding.
    pub output: Var,
}

/// Sentence embeddings for `batch`, `batch×L·2H`.
pub fn encode(tape: &mut Tape, vars: &EncoderVars, config: &EncoderConfig, batch: &SentenceBatch) -> Result<Var> {
    Ok(encode_traced(tape, vars, config, batch, EncodeOptions::default())?.output)
}

pub fn encode_traced(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    batch: &SentenceBatch,
    options: EncodeOptions,
) -> Result<EncoderTrace> {
    let vocab = tape.value(vars.embedding).shape()[0];
    for row in batch.token_ids() {
        if let Some(&bad) = row.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::Invalid {
                op: "encode",
                reason: format!("token id {bad} out of range for vocabulary of {vocab}"),
            });
        }
    }
    let n = batch.batch_size();
    let hidden = config.hidden;
    let mask = batch.mask();
    let embedded = (0..batch.max_len())
        .map(|t| tape.gather_rows(vars.embedding, &batch.column(t), Some(PAD_ID)))
        .collect::<Result<Vec<_>>>()?;

    let mut layer_outputs: Vec<BiLstmOutput> = Vec::with_capacity(config.layers);
    let mut pooled = Vec::with_capacity(config.layers);
    for k in 0..config.layers {
        let weights = &vars.layers[if config.variant == EncoderVariant::EnsTied { 0 } else { k }];
        let init = match (config.variant, layer_outputs.last()) {
            (EncoderVariant::Hbmp, Some(prev)) if !options.zero_handoff => (prev.forward_final, prev.backward_final),
            (EncoderVariant::EnsTrain, _) => {
                let [fh, fc, bh, bc] = vars.init_states.as_ref().expect("ens-train carries initial states")[k];
                (
                    StatePair {
                        h: tape.broadcast_rows(fh, n)?,
                        c: tape.broadcast_rows(fc, n)?,
                    },
                    StatePair {
                        h: tape.broadcast_rows(bh, n)?,
                        c: tape.broadcast_rows(bc, n)?,
                    },
                )
            }
            _ => (StatePair::zeros(tape, n, hidden), StatePair::zeros(tape, n, hidden)),
        };
        let input = match (config.variant, layer_outputs.last()) {
            (EncoderVariant::Stack, Some(prev)) => prev.steps.clone(),
            _ => embedded.clone(),
        };
        let out = bilstm(tape, &input, &mask, init, weights)?;
        pooled.push(temporal_max_pool(tape, &out.steps, &mask)?);
        layer_outputs.push(out);
    }
    let output = tape.concat(&pooled, 1)?;
    Ok(EncoderTrace {
        embedded,
        layer_outputs,
        pooled,
        output,
    })
}

/// Element counts per trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCensus {
    pub entries: Vec<(String, usize)>,
}

impl ParamCensus {
    fn sum_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries.iter().filter(|(n, _)| pred(n)).map(|(_, c)| c).sum()
    }

    /// All BiLSTM weights and biases.
    pub fn bilstm(&self) -> usize {
        self.sum_where(|n| n.starts_with("encoder.layer"))
    }

    pub fn embedding(&self) -> usize {
        self.sum_where(|n| n == "encoder.embedding")
    }

    /// Learned initial states (ens-train only).
    pub fn init_states(&self) -> usize {
        self.sum_where(|n| n.starts_with("encoder.init"))
    }

    pub fn total(&self) -> usize {
        self.sum_where(|_| true)
    }
}

pub fn param_census(params: &EncoderParams) -> ParamCensus {
    ParamCensus {
        entries: params.named_tensors().into_iter().map(|(n, t)| (n, t.numel())).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrent::LstmParams;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(variant: EncoderVariant) -> EncoderConfig {
        EncoderConfig {
            variant,
            vocab_size: 7,
            embed_dim: 4,
            hidden: 3,
            layers: 2,
        }
    }

    /// Parameters with every entry random, including biases and learned
    /// initial states, so no path is trivially zero.
    fn dense_random(config: &EncoderConfig, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EncoderParams::zeros(config);
        for (k, t) in p.tensors_mut().into_iter().enumerate() {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                if k == 0 && i / config.embed_dim == PAD_ID {
                    continue;
                }
                *x = rng.gen_range(-0.9..0.9);
            }
        }
        p
    }

    fn sample_batch() -> SentenceBatch {
        SentenceBatch::new(&[vec![2, 5, 3, 6], vec![4, 1]]).unwrap()
    }

    fn run(params: &EncoderParams, config: &EncoderConfig, batch: &SentenceBatch, options: EncodeOptions) -> (Tape, EncoderTrace) {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let trace = encode_traced(&mut tape, &vars, config, batch, options).unwrap();
        (tape, trace)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in EncoderVariant::ALL {
            assert_eq!(v.as_str().parse::<EncoderVariant>().unwrap(), v);
        }
        assert!("lstm".parse::<EncoderVariant>().is_err());
    }

    #[test]
    fn output_width_is_layers_times_two_hidden() {
        for variant in EncoderVariant::ALL {
            let cfg = config(variant);
            let (tape, trace) = run(&dense_random(&cfg, 1), &cfg, &sample_batch(), EncodeOptions::default());
            assert_eq!(tape.value(trace.output).shape(), &[2, 12], "{variant}");
        }
        let full = EncoderConfig {
            variant: EncoderVariant::Hbmp,
            vocab_size: 3,
            embed_dim: 2,
            hidden: 600,
            layers: 3,
        };
        assert_eq!(full.output_width(), 3600);
        let (tape, trace) = run(&EncoderParams::zeros(&full), &full, &SentenceBatch::new(&[vec![2]]).unwrap(), EncodeOptions::default());
        assert_eq!(tape.value(trace.output).shape(), &[1, 3600]);
    }

    #[test]
    fn zero_recurrent_params_give_zero_embedding() {
        for variant in EncoderVariant::ALL {
            let cfg = config(variant);
            let mut p = EncoderParams::zeros(&cfg);
            p.embedding = dense_random(&cfg, 4).embedding;
            let (tape, trace) = run(&p, &cfg, &sample_batch(), EncodeOptions::default());
            assert!(tape.value(trace.output).data().iter().all(|&x| x == 0.0), "{variant}");
        }
    }

    #[test]
    fn hbmp_without_handoff_is_ens() {
        let hbmp = config(EncoderVariant::Hbmp);
        let ens = config(EncoderVariant::Ens);
        let p = dense_random(&hbmp, 9);
        let (t1, a) = run(&p, &hbmp, &sample_batch(), EncodeOptions { zero_handoff: true });
        let (t2, b) = run(&p, &ens, &sample_batch(), EncodeOptions::default());
        assert_eq!(t1.value(a.output), t2.value(b.output));
        let (t3, c) = run(&p, &hbmp, &sample_batch(), EncodeOptions::default());
        assert_ne!(t3.value(c.output), t2.value(b.output));
    }

    #[test]
    fn hbmp_and_stack_share_first_layer() {
        let hbmp = config(EncoderVariant::Hbmp);
        let stack = config(EncoderVariant::Stack);
        let mut ps = dense_random(&stack, 10);
        let mut ph = dense_random(&hbmp, 11);
        ph.embedding = ps.embedding.clone();
        ps.layers[0] = ph.layers[0].clone();
        let (t1, a) = run(&ph, &hbmp, &sample_batch(), EncodeOptions::default());
        let (t2, b) = run(&ps, &stack, &sample_batch(), EncodeOptions::default());
        let seq_a = a.layer_outputs[0].sequence_tensor(&t1);
        let seq_b = b.layer_outputs[0].sequence_tensor(&t2);
        for (x, y) in seq_a.data().iter().zip(seq_b.data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn out_of_range_token_is_rejected() {
        let cfg = config(EncoderVariant::Ens);
        let p = dense_random(&cfg, 2);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let batch = SentenceBatch::new(&[vec![2, 7]]).unwrap();
        let err = encode(&mut tape, &vars, &cfg, &batch).unwrap_err();
        assert!(err.to_string().contains("token id 7"));
    }

    #[test]
    fn census_counts() {
        assert_eq!(LstmParams::zeros(3, 2).tensors().iter().map(|(_, t)| t.numel()).sum::<usize>(), 48);

        let mk = |variant| {
            let cfg = EncoderConfig {
                variant,
                vocab_size: 10,
                embed_dim: 5,
                hidden: 4,
                layers: 3,
            };
            param_census(&EncoderParams::zeros(&cfg))
        };
        let ens = mk(EncoderVariant::Ens);
        let tied = mk(EncoderVariant::EnsTied);
        let train = mk(EncoderVariant::EnsTrain);
        assert_eq!(ens.bilstm(), 3 * tied.bilstm());
        assert_eq!(ens.embedding(), 50);
        // h and c per direction per layer, each of width H
        assert_eq!(train.init_states(), 2 * 3 * 2 * 4);
        assert_eq!(train.total() - ens.total(), 48);
        assert_eq!(mk(EncoderVariant::Hbmp), ens);
        // layers 2 and 3 of stack read 2H = 8 inputs instead of E = 5
        assert_eq!(mk(EncoderVariant::Stack).bilstm() - ens.bilstm(), 2 * 2 * 4 * 4 * 3);
    }

    #[test]
    fn every_variant_passes_grad_check() {
        let batch = SentenceBatch::new(&[vec![2, 5, 3, 6], vec![4, 1, 3]]).unwrap();
        for variant in EncoderVariant::ALL {
            let cfg = config(variant);
            let p = dense_random(&cfg, 17);
            let inputs: Vec<Tensor> = p.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
            let weights = Tensor::new(vec![2, 12], (0..24).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
            let report = grad_check(
                |tape, v| {
                    let vars = p.bind(&mut v.iter().copied());
                    let out = encode(tape, &vars, &cfg, &batch)?;
                    let w = tape.constant(weights.clone());
                    let prod = tape.mul(out, w)?;
                    Ok(tape.sum(prod))
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(report.max_error() < 1e-4, "{variant}: {report:?}");
        }
    }

    #[test]
    fn pad_row_gets_no_gradient() {
        let cfg = config(EncoderVariant::Hbmp);
        let p = dense_random(&cfg, 5);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let out = encode(&mut tape, &vars, &cfg, &sample_batch().padded_to(6).unwrap()).unwrap();
        let s = tape.sum(out);
        tape.backward(s).unwrap();
        let g = tape.grad(vars.embedding).unwrap();
        assert!(g[..cfg.embed_dim].iter().all(|&x| x == 0.0));
        assert!(g[cfg.embed_dim..].iter().any(|&x| x != 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn padding_leaves_embeddings_unchanged(seed in any::<u64>(), extra in 1usize..6, v in 0usize..5) {
            let cfg = config(EncoderVariant::ALL[v]);
            let p = dense_random(&cfg, seed);
            let batch = sample_batch();
            let (t1, a) = run(&p, &cfg, &batch, EncodeOptions::default());
            let (t2, b) = run(&p, &cfg, &batch.padded_to(batch.max_len() + extra).unwrap(), EncodeOptions::default());
            prop_assert_eq!(t1.value(a.output), t2.value(b.output));
        }
    }
}
