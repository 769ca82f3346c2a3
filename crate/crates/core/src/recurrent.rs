//! LSTM cell, bidirectional LSTM over padded batches, and temporal max pooling.
//!
//! Gate layout in every weight matrix is (input, forget, cell candidate,
//! output), each block `H` rows tall. Padded timesteps never change a row's
//! state: the recurrence carries the previous state through them, so a
//! batch padded to any length produces the same outputs as an unpadded one.

use rand::Rng;

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Token id reserved for padding.
pub const PAD_ID: usize = 0;

/// Parameters of one directional LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `4H×E` input weights.
    pub w_x: Tensor,
    /// `4H×H` recurrent weights.
    pub w_h: Tensor,
    /// `4H` bias.
    pub b: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[4 * hidden, input]),
            w_h: Tensor::zeros(&[4 * hidden, hidden]),
            b: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Weights uniform on `(-1/√H, 1/√H)`, forget-gate bias 1, other biases 0.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(input, hidden);
        for w in [&mut p.w_x, &mut p.w_h] {
            w.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-bound..bound));
        }
        p.b.data_mut()[hidden..2 * hidden].fill(1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.w_h.shape()[1]
    }

    pub fn input_size(&self) -> usize {
        self.w_x.shape()[1]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 3] {
        [("w_x", &self.w_x), ("w_h", &self.w_h), ("b", &self.b)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 3] {
        [("w_x", &mut self.w_x), ("w_h", &mut self.w_h), ("b", &mut self.b)]
    }
}

/// [`LstmParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            forward: LstmParams::zeros(input, hidden),
            backward: LstmParams::zeros(input, hidden),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            forward: LstmParams::init(input, hidden, rng),
            backward: LstmParams::init(input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn numel(&self) -> usize {
        [&self.forward, &self.backward]
            .iter()
            .flat_map(|p| p.tensors())
            .map(|(_, t)| t.numel())
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmVars {
    pub forward: LstmVars,
    pub backward: LstmVars,
}

/// Hidden and cell state of one direction, each `batch×H`.
#[derive(Clone, Copy, Debug)]
pub struct StatePair {
    pub h: Var,
    pub c: Var,
}

impl StatePair {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[batch, hidden])),
            c: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// Padded token-id matrix for a minibatch of sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceBatch {
    token_ids: Vec<Vec<usize>>,
    lengths: Vec<usize>,
}

impl SentenceBatch {
    /// Pads `sequences` with [`PAD_ID`] to the longest one.
    pub fn new(sequences: &[Vec<usize>]) -> Result<Self> {
        let max_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
        Self::with_max_len(sequences, max_len)
    }

    /// Pads `sequences` to exactly `max_len` steps.
    pub fn with_max_len(sequences: &[Vec<usize>], max_len: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(TensorError::Invalid {
                op: "sentence_batch",
                reason: "empty batch".into(),
            });
        }
        if let Some(row) = sequences.iter().position(Vec::is_empty) {
            return Err(TensorError::Invalid {
                op: "sentence_batch",
                reason: format!("sentence {row} has length 0"),
            });
        }
        if let Some(row) = sequences.iter().position(|s| s.len() > max_len) {
            return Err(TensorError::Invalid {
                op: "sentence_batch",
                reason: format!("sentence {row} is longer than {max_len}"),
            });
        }
        let token_ids = sequences
            .iter()
            .map(|s| {
                let mut row = s.clone();
                row.resize(max_len, PAD_ID);
                row
            })
            .collect();
        Ok(Self {
            token_ids,
            lengths: sequences.iter().map(Vec::len).collect(),
        })
    }

    /// The same sentences padded to `max_len` steps.
    pub fn padded_to(&self, max_len: usize) -> Result<Self> {
        Self::with_max_len(&self.sequences(), max_len)
    }

    /// Unpadded rows.
    pub fn sequences(&self) -> Vec<Vec<usize>> {
        self.token_ids
            .iter()
            .zip(&self.lengths)
            .map(|(row, &len)| row[..len].to_vec())
            .collect()
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.token_ids[0].len()
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn token_ids(&self) -> &[Vec<usize>] {
        &self.token_ids
    }

    /// Ids at timestep `t` across the batch.
    pub fn column(&self, t: usize) -> Vec<usize> {
        self.token_ids.iter().map(|row| row[t]).collect()
    }

    /// `mask[i][t] = t < lengths[i]`.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        let t_max = self.max_len();
        self.lengths.iter().map(|&len| (0..t_max).map(|t| t < len).collect()).collect()
    }
}

/// One LSTM step: `c' = f∘c + i∘g`, `h' = o∘tanh(c')`.
pub fn lstm_cell(tape: &mut Tape, x: Var, state: StatePair, p: &LstmVars) -> Result<StatePair> {
    let hidden = tape.value(p.w_h).shape()[1];
    let from_input = tape.matmul_nt(x, p.w_x)?;
    let from_state = tape.matmul_nt(state.h, p.w_h)?;
    let summed = tape.add(from_input, from_state)?;
    let pre = tape.add_row(summed, p.b)?;

    let gate = |tape: &mut Tape, k: usize| tape.narrow(pre, 1, k * hidden, hidden);
    let (i_pre, f_pre, g_pre, o_pre) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let kept = tape.mul(f, state.c)?;
    let written = tape.mul(i, g)?;
    let c = tape.add(kept, written)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok(StatePair { h, c })
}

/// Output of [`bilstm`].
#[derive(Clone, Debug)]
pub struct BiLstmOutput {
    /// `batch×2H` per timestep: `[forward_t, backward_t]`.
    pub steps: Vec<Var>,
    /// Forward state after each row's last real token.
    pub forward_final: StatePair,
    /// Backward state after timestep 1, its last consumed input.
    pub backward_final: StatePair,
}

impl BiLstmOutput {
    /// Stacks the per-step outputs into a `batch×T×2H` tensor.
    pub fn sequence_tensor(&self, tape: &Tape) -> Tensor {
        let first = tape.value(self.steps[0]);
        let (batch, width) = first.dims2().expect("2-D step outputs");
        let t_max = self.steps.len();
        let mut data = vec![0.0; batch * t_max * width];
        for (t, &s) in self.steps.iter().enumerate() {
            for i in 0..batch {
                let dst = (i * t_max + t) * width;
                data[dst..dst + width].copy_from_slice(tape.value(s).row(i));
            }
        }
        Tensor::new(vec![batch, t_max, width], data).expect("consistent shape")
    }
}

fn run_direction(
    tape: &mut Tape,
    inputs: &[Var],
    mask: &[Vec<bool>],
    init: StatePair,
    p: &LstmVars,
    order: impl Iterator<Item = usize>,
) -> Result<(Vec<Var>, StatePair)> {
    let mut outputs = vec![init.h; inputs.len()];
    let mut state = init;
    for t in order {
        let active: Vec<bool> = mask.iter().map(|row| row[t]).collect();
        if active.iter().any(|&a| a) {
            let next = lstm_cell(tape, inputs[t], state, p)?;
            state = if active.iter().all(|&a| a) {
                next
            } else {
                StatePair {
                    h: tape.select_rows(&active, next.h, state.h)?,
                    c: tape.select_rows(&active, next.c, state.c)?,
                }
            };
        }
        outputs[t] = state.h;
    }
    Ok((outputs, state))
}

/// Runs both directions over `inputs` (one `batch×E` value per timestep).
///
/// The forward direction reads steps `1..=len` of each row and the backward
/// direction reads `len..=1`; masked steps leave the state untouched.
pub fn bilstm(
    tape: &mut Tape,
    inputs: &[Var],
    mask: &[Vec<bool>],
    init: (StatePair, StatePair),
    p: &BiLstmVars,
) -> Result<BiLstmOutput> {
    let t_max = inputs.len();
    if t_max == 0 {
        return Err(TensorError::Invalid {
            op: "bilstm",
            reason: "empty sequence".into(),
        });
    }
    let batch = tape.value(inputs[0]).shape()[0];
    if mask.len() != batch || mask.iter().any(|row| row.len() != t_max) {
        return Err(TensorError::Invalid {
            op: "bilstm",
            reason: format!("mask does not match {batch} rows × {t_max} steps"),
        });
    }
    if let Some(row) = mask.iter().position(|m| !m.first().copied().unwrap_or(false)) {
        return Err(TensorError::Invalid {
            op: "bilstm",
            reason: format!("sentence {row} has length 0"),
        });
    }
    let (fwd_steps, forward_final) = run_direction(tape, inputs, mask, init.0, &p.forward, 0..t_max)?;
    let (bwd_steps, backward_final) = run_direction(tape, inputs, mask, init.1, &p.backward, (0..t_max).rev())?;
    let steps = fwd_steps
        .into_iter()
        .zip(bwd_steps)
        .map(|(f, b)| tape.concat(&[f, b], 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(BiLstmOutput {
        steps,
        forward_final,
        backward_final,
    })
}

/// Per-dimension maximum over the unmasked timesteps of each row.
pub fn temporal_max_pool(tape: &mut Tape, steps: &[Var], mask: &[Vec<bool>]) -> Result<Var> {
    tape.max_pool(steps, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    fn random_lstm(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> LstmParams {
        LstmParams {
            w_x: random_tensor(rng, &[4 * hidden, input], 0.8),
            w_h: random_tensor(rng, &[4 * hidden, hidden], 0.8),
            b: random_tensor(rng, &[4 * hidden], 0.5),
        }
    }

    fn register(tape: &mut Tape, p: &LstmParams) -> LstmVars {
        LstmVars {
            w_x: tape.leaf(p.w_x.clone()),
            w_h: tape.leaf(p.w_h.clone()),
            b: tape.leaf(p.b.clone()),
        }
    }

    fn register_bi(tape: &mut Tape, p: &BiLstmParams) -> BiLstmVars {
        BiLstmVars {
            forward: register(tape, &p.forward),
            backward: register(tape, &p.backward),
        }
    }

    /// Per-coordinate scalar evaluation of one LSTM step for a single row.
    fn scalar_cell(p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hidden = p.hidden();
        let pre = |row: usize| {
            let mut acc = p.b.data()[row];
            for (e, xv) in x.iter().enumerate() {
                acc += p.w_x.get2(row, e) * xv;
            }
            for (k, hv) in h.iter().enumerate() {
                acc += p.w_h.get2(row, k) * hv;
            }
            acc
        };
        let mut h_out = vec![0.0; hidden];
        let mut c_out = vec![0.0; hidden];
        for j in 0..hidden {
            let i = sigmoid(pre(j));
            let f = sigmoid(pre(hidden + j));
            let g = pre(2 * hidden + j).tanh();
            let o = sigmoid(pre(3 * hidden + j));
            c_out[j] = f * c[j] + i * g;
            h_out[j] = o * c_out[j].tanh();
        }
        (h_out, c_out)
    }

    fn embed_steps(tape: &mut Tape, rows: &[Vec<Vec<f64>>]) -> Vec<Var> {
        // rows[i][t] is the input vector of row i at step t
        let t_max = rows.iter().map(Vec::len).max().unwrap();
        let width = rows[0][0].len();
        (0..t_max)
            .map(|t| {
                let data = rows
                    .iter()
                    .flat_map(|r| r.get(t).cloned().unwrap_or_else(|| vec![0.0; width]))
                    .collect();
                tape.constant(Tensor::new(vec![rows.len(), width], data).unwrap())
            })
            .collect()
    }

    fn mask_for(lengths: &[usize], t_max: usize) -> Vec<Vec<bool>> {
        lengths.iter().map(|&l| (0..t_max).map(|t| t < l).collect()).collect()
    }

    #[test]
    fn zero_params_keep_zero_state() {
        let mut tape = Tape::new();
        let p = register(&mut tape, &LstmParams::zeros(2, 3));
        let x = tape.constant(Tensor::filled(&[2, 2], 0.7));
        let s = StatePair::zeros(&mut tape, 2, 3);
        let out = lstm_cell(&mut tape, x, s, &p).unwrap();
        assert!(tape.value(out.h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_halve_unit_cell() {
        let mut tape = Tape::new();
        let p = register(&mut tape, &LstmParams::zeros(2, 3));
        let x = tape.constant(Tensor::filled(&[1, 2], -0.3));
        let s = StatePair {
            h: tape.constant(Tensor::zeros(&[1, 3])),
            c: tape.constant(Tensor::filled(&[1, 3], 1.0)),
        };
        let out = lstm_cell(&mut tape, x, s, &p).unwrap();
        for &c in tape.value(out.c).data() {
            assert_relative_eq!(c, 0.5, max_relative = 1e-15);
        }
        for &h in tape.value(out.h).data() {
            assert_relative_eq!(h, 0.5 * 0.5f64.tanh(), max_relative = 1e-15);
            assert_relative_eq!(h, 0.2311, max_relative = 1e-3);
        }
    }

    #[test]
    fn cell_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_lstm(&mut rng, 2, 3);
        let x = random_tensor(&mut rng, &[2, 2], 1.0);
        let h = random_tensor(&mut rng, &[2, 3], 1.0);
        let c = random_tensor(&mut rng, &[2, 3], 1.0);

        let mut tape = Tape::new();
        let vars = register(&mut tape, &p);
        let xv = tape.constant(x.clone());
        let state = StatePair {
            h: tape.constant(h.clone()),
            c: tape.constant(c.clone()),
        };
        let out = lstm_cell(&mut tape, xv, state, &vars).unwrap();
        for row in 0..2 {
            let (ho, co) = scalar_cell(&p, x.row(row), h.row(row), c.row(row));
            for j in 0..3 {
                assert_relative_eq!(tape.value(out.h).get2(row, j), ho[j], max_relative = 1e-12);
                assert_relative_eq!(tape.value(out.c).get2(row, j), co[j], max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn cell_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let p = register(&mut tape, &LstmParams::zeros(2, 3));
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let s = StatePair::zeros(&mut tape, 1, 3);
        assert!(matches!(lstm_cell(&mut tape, x, s, &p), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn full_cell_loss_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_lstm(&mut rng, 2, 3);
        let inputs = vec![
            p.w_x.clone(),
            p.w_h.clone(),
            p.b.clone(),
            random_tensor(&mut rng, &[2, 2], 1.0),
            random_tensor(&mut rng, &[2, 3], 1.0),
            random_tensor(&mut rng, &[2, 3], 1.0),
        ];
        let report = grad_check(
            |tape, v| {
                let vars = LstmVars { w_x: v[0], w_h: v[1], b: v[2] };
                let out = lstm_cell(tape, v[3], StatePair { h: v[4], c: v[5] }, &vars)?;
                let both = tape.concat(&[out.h, out.c], 1)?;
                let sq = tape.mul(both, both)?;
                Ok(tape.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn single_step_runs_both_directions_on_same_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = BiLstmParams {
            forward: random_lstm(&mut rng, 2, 3),
            backward: random_lstm(&mut rng, 2, 3),
        };
        let x = vec![0.4, -0.9];
        let mut tape = Tape::new();
        let vars = register_bi(&mut tape, &params);
        let inputs = embed_steps(&mut tape, &[vec![x.clone()]]);
        let init = (StatePair::zeros(&mut tape, 1, 3), StatePair::zeros(&mut tape, 1, 3));
        let out = bilstm(&mut tape, &inputs, &[vec![true]], init, &vars).unwrap();
        let zero = [0.0; 3];
        let (fh, _) = scalar_cell(&params.forward, &x, &zero, &zero);
        let (bh, _) = scalar_cell(&params.backward, &x, &zero, &zero);
        let expected: Vec<f64> = fh.into_iter().chain(bh).collect();
        for (a, b) in tape.value(out.steps[0]).data().iter().zip(&expected) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let mut tape = Tape::new();
        let vars = register_bi(&mut tape, &BiLstmParams::zeros(2, 3));
        let rows = vec![vec![vec![1.0, 2.0]; 3], vec![vec![-1.0, 0.5]; 2]];
        let inputs = embed_steps(&mut tape, &rows);
        let init = (StatePair::zeros(&mut tape, 2, 3), StatePair::zeros(&mut tape, 2, 3));
        let out = bilstm(&mut tape, &inputs, &mask_for(&[3, 2], 3), init, &vars).unwrap();
        for s in out.steps.iter().chain([&out.forward_final.h, &out.forward_final.c, &out.backward_final.c]) {
            assert!(tape.value(*s).data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(out.sequence_tensor(&tape).shape(), &[2, 3, 6]);
    }

    #[test]
    fn zero_length_is_rejected() {
        assert!(SentenceBatch::new(&[vec![2, 3], vec![]]).is_err());
        let mut tape = Tape::new();
        let vars = register_bi(&mut tape, &BiLstmParams::zeros(2, 3));
        let inputs = embed_steps(&mut tape, &[vec![vec![1.0, 2.0]; 2], vec![vec![1.0, 2.0]; 2]]);
        let init = (StatePair::zeros(&mut tape, 2, 3), StatePair::zeros(&mut tape, 2, 3));
        assert!(bilstm(&mut tape, &inputs, &mask_for(&[2, 0], 2), init, &vars).is_err());
    }

    /// Runs a full BiLSTM over each row separately with a scalar oracle.
    fn unbatched_oracle(params: &BiLstmParams, row: &[Vec<f64>]) -> (Vec<Vec<f64>>, [Vec<f64>; 4]) {
        let hidden = params.hidden();
        let (mut fh, mut fc) = (vec![0.0; hidden], vec![0.0; hidden]);
        let mut fwd = Vec::new();
        for x in row {
            (fh, fc) = scalar_cell(&params.forward, x, &fh, &fc);
            fwd.push(fh.clone());
        }
        let (mut bh, mut bc) = (vec![0.0; hidden], vec![0.0; hidden]);
        let mut bwd = vec![Vec::new(); row.len()];
        for (t, x) in row.iter().enumerate().rev() {
            (bh, bc) = scalar_cell(&params.backward, x, &bh, &bc);
            bwd[t] = bh.clone();
        }
        let seq = fwd.into_iter().zip(bwd).map(|(f, b)| [f, b].concat()).collect();
        (seq, [fh, fc, bh, bc])
    }

    #[test]
    fn batched_rows_match_unbatched_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = BiLstmParams {
            forward: random_lstm(&mut rng, 2, 3),
            backward: random_lstm(&mut rng, 2, 3),
        };
        let rows: Vec<Vec<Vec<f64>>> = [3usize, 1]
            .iter()
            .map(|&len| (0..len).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
            .collect();
        let mut tape = Tape::new();
        let vars = register_bi(&mut tape, &params);
        let inputs = embed_steps(&mut tape, &rows);
        let init = (StatePair::zeros(&mut tape, 2, 3), StatePair::zeros(&mut tape, 2, 3));
        let out = bilstm(&mut tape, &inputs, &mask_for(&[3, 1], 3), init, &vars).unwrap();

        for (i, row) in rows.iter().enumerate() {
            let (seq, finals) = unbatched_oracle(&params, row);
            for (t, expected) in seq.iter().enumerate() {
                for (a, b) in tape.value(out.steps[t]).row(i).iter().zip(expected) {
                    assert_relative_eq!(a, b, max_relative = 1e-12);
                }
            }
            let got = [out.forward_final.h, out.forward_final.c, out.backward_final.h, out.backward_final.c];
            for (var, expected) in got.iter().zip(&finals) {
                for (a, b) in tape.value(*var).row(i).iter().zip(expected) {
                    assert_relative_eq!(a, b, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_examples() {
        let seq = [[1.0, -2.0], [3.0, 0.0], [-1.0, 4.0]];
        let mut tape = Tape::new();
        let steps: Vec<Var> = seq.iter().map(|r| tape.constant(Tensor::new(vec![1, 2], r.to_vec()).unwrap())).collect();
        let all = temporal_max_pool(&mut tape, &steps, &[vec![true; 3]]).unwrap();
        assert_eq!(tape.value(all).data(), &[3.0, 4.0]);
        let masked = temporal_max_pool(&mut tape, &steps, &[vec![true, true, false]]).unwrap();
        assert_eq!(tape.value(masked).data(), &[3.0, 0.0]);

        let mut padded = steps.clone();
        for _ in 0..5 {
            padded.push(tape.constant(Tensor::filled(&[1, 2], 100.0)));
        }
        let mut mask = vec![true; 3];
        mask.extend([false; 5]);
        let p = temporal_max_pool(&mut tape, &padded, &[mask]).unwrap();
        assert_eq!(tape.value(p).data(), tape.value(all).data());
        assert!(temporal_max_pool(&mut tape, &steps, &[vec![false; 3]]).is_err());
    }

    #[test]
    fn ties_route_gradient_to_earliest_step() {
        for _ in 0..3 {
            let mut tape = Tape::new();
            let steps: Vec<Var> = (0..4).map(|_| tape.leaf(Tensor::filled(&[1, 2], 0.25))).collect();
            let p = temporal_max_pool(&mut tape, &steps, &[vec![true; 4]]).unwrap();
            let s = tape.sum(p);
            tape.backward(s).unwrap();
            assert_eq!(tape.grad(steps[0]).unwrap(), &[1.0, 1.0]);
            for &later in &steps[1..] {
                assert!(tape.grad(later).map_or(true, |g| g.iter().all(|&x| x == 0.0)));
            }
        }
    }

    #[test]
    fn bilstm_pool_composite_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let params = BiLstmParams {
            forward: random_lstm(&mut rng, 2, 3),
            backward: random_lstm(&mut rng, 2, 3),
        };
        let lengths = [3usize, 2];
        let mask = mask_for(&lengths, 3);
        let mut inputs: Vec<Tensor> = [&params.forward, &params.backward]
            .iter()
            .flat_map(|p| [p.w_x.clone(), p.w_h.clone(), p.b.clone()])
            .collect();
        for _ in 0..3 {
            inputs.push(random_tensor(&mut rng, &[2, 2], 1.0));
        }
        let report = grad_check(
            |tape, v| {
                let vars = BiLstmVars {
                    forward: LstmVars { w_x: v[0], w_h: v[1], b: v[2] },
                    backward: LstmVars { w_x: v[3], w_h: v[4], b: v[5] },
                };
                let init = (StatePair::zeros(tape, 2, 3), StatePair::zeros(tape, 2, 3));
                let out = bilstm(tape, &v[6..], &mask, init, &vars)?;
                let pooled = temporal_max_pool(tape, &out.steps, &mask)?;
                Ok(tape.sum(pooled))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn sentence_batch_mask_and_padding() {
        let b = SentenceBatch::new(&[vec![4, 5, 6], vec![7]]).unwrap();
        assert_eq!(b.token_ids(), &[vec![4, 5, 6], vec![7, PAD_ID, PAD_ID]]);
        assert_eq!(b.mask(), vec![vec![true, true, true], vec![true, false, false]]);
        let p = b.padded_to(5).unwrap();
        assert_eq!(p.max_len(), 5);
        assert_eq!(p.sequences(), b.sequences());
        assert!(b.padded_to(2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn padding_and_batching_do_not_change_results(
            seed in any::<u64>(),
            lengths in proptest::collection::vec(1usize..5, 1..4),
            extra in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = BiLstmParams {
                forward: random_lstm(&mut rng, 2, 3),
                backward: random_lstm(&mut rng, 2, 3),
            };
            let rows: Vec<Vec<Vec<f64>>> = lengths
                .iter()
                .map(|&len| (0..len).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
                .collect();
            let t_max = *lengths.iter().max().unwrap();

            let run = |rows: &[Vec<Vec<f64>>], lengths: &[usize], t_len: usize| {
                let mut tape = Tape::new();
                let vars = register_bi(&mut tape, &params);
                let mut padded_rows = rows.to_vec();
                for r in &mut padded_rows {
                    r.resize(t_len, vec![0.0, 0.0]);
                }
                let inputs = embed_steps(&mut tape, &padded_rows);
                let mask = mask_for(lengths, t_len);
                let n = rows.len();
                let init = (StatePair::zeros(&mut tape, n, 3), StatePair::zeros(&mut tape, n, 3));
                let out = bilstm(&mut tape, &inputs, &mask, init, &vars).unwrap();
                let pooled = temporal_max_pool(&mut tape, &out.steps, &mask).unwrap();
                let finals = [out.forward_final.h, out.forward_final.c, out.backward_final.h, out.backward_final.c]
                    .map(|v| tape.value(v).clone());
                (tape.value(pooled).clone(), finals)
            };

            let base = run(&rows, &lengths, t_max);
            let padded = run(&rows, &lengths, t_max + extra);
            prop_assert_eq!(&base, &padded);

            for (i, row) in rows.iter().enumerate() {
                let single = run(&rows[i..=i], &lengths[i..=i], row.len());
                prop_assert_eq!(single.0.data(), base.0.row(i));
                for (a, b) in single.1.iter().zip(&base.1) {
                    prop_assert_eq!(a.data(), b.row(i));
                }
            }
        }
    }
}
