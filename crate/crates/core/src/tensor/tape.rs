use super::{matmul_into, matmul_nt_into, matmul_tn_into, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    MulConst { a: Var, factor: Vec<f64> },
    Abs(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize>, frozen_row: Option<usize> },
    Select { mask: Vec<bool>, on: Var, off: Var },
    BroadcastRows(Var),
    MaxPool { steps: Vec<Var>, argmax: Vec<usize> },
    Sum(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

/// Define-by-run record of tensor operations.
///
/// Operations are appended in evaluation order, so the record is always
/// topologically sorted. Values are never mutated after being recorded.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    corrupt_backward: bool,
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a `rows×cols` buffer, computed with max subtraction.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose sigmoid backward rule is deliberately wrong. Used to
    /// confirm that the gradient checker actually detects broken rules.
    #[doc(hidden)]
    pub fn with_corrupted_backward() -> Self {
        Self {
            corrupt_backward: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when `v` was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.values[v.0].shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad mirrors value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.values[v.0].dims2().ok_or_else(|| TensorError::Invalid {
            op,
            reason: format!("expected a 2-D operand, got {:?}", self.values[v.0].shape()),
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.values[a.0].shape(), self.values[b.0].shape());
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`; the natural form for `x · Wᵀ` with `W` stored as out×in.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.values[a.0].data(), self.values[b.0].data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMulNt(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op_name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op_name)?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        let row_shape = self.values[row.0].shape();
        if row_shape.iter().product::<usize>() != n || row_shape.last() != Some(&n) {
            return Err(TensorError::Shape {
                op: "add_row",
                left: vec![m, n],
                right: row_shape.to_vec(),
            });
        }
        let bias = self.values[row.0].data();
        let mut data = self.values[a.0].data().to_vec();
        for r in data.chunks_mut(n) {
            for (x, &b) in r.iter_mut().zip(bias) {
                *x += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::AddRow { a, row }, rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.values[a.0];
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        let rg = self.requires_grad[a.0];
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    /// Elementwise product with a constant buffer (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        let src = &self.values[a.0];
        if factor.len() != src.numel() {
            return Err(TensorError::Shape {
                op: "mul_const",
                left: src.shape().to_vec(),
                right: vec![factor.len()],
            });
        }
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().zip(&factor).map(|(x, f)| x * f).collect(),
        };
        let rg = self.requires_grad[a.0];
        Ok(self.push(value, Op::MulConst { a, factor }, rg))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid_scalar)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// `max(0, x) + slope·min(0, x)`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), move |x| x.max(0.0) + slope * x.min(0.0))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            reason: "no operands".into(),
        })?;
        let base = self.values[first.0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.values[p.0].shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: base,
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.values[p.0];
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.values[a.0].shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                reason: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.values[a.0].data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad[a.0];
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Narrow { a, axis, start }, rg))
    }

    /// Row lookup `table[ids[i]]`. `frozen_row`, when set, never receives gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], frozen_row: Option<usize>) -> Result<Var> {
        let (rows, cols) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                reason: format!("index {bad} out of range for table with {rows} rows"),
            });
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                reason: "no indices".into(),
            });
        }
        let src = self.values[table.0].data();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        let rg = self.requires_grad[table.0];
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
            frozen_row,
        };
        Ok(self.push(Tensor { shape: vec![ids.len(), cols], data }, op, rg))
    }

    /// Row-wise choice: row `i` comes from `on` where `mask[i]`, else from `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        self.same_shape(on, off, "select_rows")?;
        let (rows, cols) = self.dims2(on, "select_rows")?;
        if mask.len() != rows {
            return Err(TensorError::Shape {
                op: "select_rows",
                left: vec![rows, cols],
                right: vec![mask.len()],
            });
        }
        let (a, b) = (self.values[on.0].data(), self.values[off.0].data());
        let mut data = Vec::with_capacity(rows * cols);
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { a } else { b };
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.any_grad(&[on, off]);
        let op = Op::Select {
            mask: mask.to_vec(),
            on,
            off,
        };
        Ok(self.push(Tensor { shape: vec![rows, cols], data }, op, rg))
    }

    /// Repeats a `1×n` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, n) = self.dims2(a, "broadcast_rows")?;
        if r != 1 || rows == 0 {
            return Err(TensorError::Invalid {
                op: "broadcast_rows",
                reason: format!("cannot broadcast {:?} to {rows} rows", [r, n]),
            });
        }
        let row = self.values[a.0].data().to_vec();
        let data = row.iter().copied().cycle().take(rows * n).collect();
        let rg = self.requires_grad[a.0];
        Ok(self.push(Tensor { shape: vec![rows, n], data }, Op::BroadcastRows(a), rg))
    }

    /// Per-dimension maximum over the active steps of each row.
    ///
    /// `steps` are `batch×D` values for successive timesteps and
    /// `active[i][t]` marks whether step `t` of row `i` takes part. Ties
    /// resolve to the earliest timestep, which is also where the gradient goes.
    pub fn max_pool(&mut self, steps: &[Var], active: &[Vec<bool>]) -> Result<Var> {
        let first = *steps.first().ok_or(TensorError::Invalid {
            op: "max_pool",
            reason: "empty sequence".into(),
        })?;
        let (batch, dim) = self.dims2(first, "max_pool")?;
        for &s in steps {
            self.same_shape(first, s, "max_pool")?;
        }
        if active.len() != batch || active.iter().any(|m| m.len() < steps.len()) {
            return Err(TensorError::Invalid {
                op: "max_pool",
                reason: format!("mask does not cover {batch} rows × {} steps", steps.len()),
            });
        }
        let mut data = vec![0.0; batch * dim];
        let mut argmax = vec![0usize; batch * dim];
        for (i, row_mask) in active.iter().enumerate() {
            let mut seen = false;
            for (t, &s) in steps.iter().enumerate() {
                if !row_mask[t] {
                    continue;
                }
                let row = self.values[s.0].row(i);
                for d in 0..dim {
                    let slot = i * dim + d;
                    if !seen || row[d] > data[slot] {
                        data[slot] = row[d];
                        argmax[slot] = t;
                    }
                }
                seen = true;
            }
            if !seen {
                return Err(TensorError::Invalid {
                    op: "max_pool",
                    reason: format!("row {i} has no unmasked step"),
                });
            }
        }
        let rg = self.any_grad(steps);
        let op = Op::MaxPool {
            steps: steps.to_vec(),
            argmax,
        };
        Ok(self.push(Tensor { shape: vec![batch, dim], data }, op, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.values[a.0].data().iter().sum();
        let rg = self.requires_grad[a.0];
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, classes) = self.dims2(logits, "softmax_cross_entropy")?;
        if labels.len() != batch {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                left: vec![batch, classes],
                right: vec![labels.len()],
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(TensorError::LabelOutOfRange { row, label, classes });
        }
        let data = self.values[logits.0].data();
        let mut loss = 0.0;
        for (row, &label) in data.chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss /= batch as f64;
        let probs = softmax_rows(data, classes);
        let rg = self.requires_grad[logits.0];
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, numel: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(slot);
    }

    /// Reverse sweep from a scalar `loss`. Gradients of a previous sweep are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::NonScalar(self.values[loss.0].shape().to_vec()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);

        let values = &self.values;
        let grads = &mut self.grads;
        let requires = &self.requires_grad;
        let corrupt = self.corrupt_backward;

        for idx in (0..=loss.0).rev() {
            if !requires[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let numel = |v: Var| values[v.0].numel();
            let wants = |v: Var| requires[v.0];
            match &self.ops[idx] {
                Op::Leaf => {}
                &Op::MatMul(a, b) => {
                    let (m, k) = values[a.0].dims2().unwrap();
                    let n = values[b.0].shape()[1];
                    if wants(a) {
                        Self::accumulate(grads, a, m * k, |ga| {
                            matmul_nt_into(&g, values[b.0].data(), ga, m, n, k)
                        });
                    }
                    if wants(b) {
                        Self::accumulate(grads, b, k * n, |gb| {
                            matmul_tn_into(values[a.0].data(), &g, gb, m, k, n)
                        });
                    }
                }
                &Op::MatMulNt(a, b) => {
                    let (m, k) = values[a.0].dims2().unwrap();
                    let n = values[b.0].shape()[0];
                    if wants(a) {
                        Self::accumulate(grads, a, m * k, |ga| {
                            matmul_into(&g, values[b.0].data(), ga, m, n, k)
                        });
                    }
                    if wants(b) {
                        Self::accumulate(grads, b, n * k, |gb| {
                            matmul_tn_into(&g, values[a.0].data(), gb, m, n, k)
                        });
                    }
                }
                &Op::Add(a, b) | &Op::Sub(a, b) => {
                    let sign = if matches!(self.ops[idx], Op::Sub(..)) { -1.0 } else { 1.0 };
                    if wants(a) {
                        Self::accumulate(grads, a, g.len(), |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    }
                    if wants(b) {
                        Self::accumulate(grads, b, g.len(), |gb| {
                            gb.iter_mut().zip(&g).for_each(|(x, y)| *x += sign * y)
                        });
                    }
                }
                &Op::Mul(a, b) => {
                    if wants(a) {
                        let other = values[b.0].data();
                        Self::accumulate(grads, a, g.len(), |ga| {
                            for ((x, y), o) in ga.iter_mut().zip(&g).zip(other) {
                                *x += y * o;
                            }
                        });
                    }
                    if wants(b) {
                        let other = values[a.0].data();
                        Self::accumulate(grads, b, g.len(), |gb| {
                            for ((x, y), o) in gb.iter_mut().zip(&g).zip(other) {
                                *x += y * o;
                            }
                        });
                    }
                }
                &Op::AddRow { a, row } => {
                    if wants(a) {
                        Self::accumulate(grads, a, g.len(), |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y));
                    }
                    if wants(row) {
                        let n = numel(row);
                        Self::accumulate(grads, row, n, |gr| {
                            for chunk in g.chunks(n) {
                                gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                }
                &Op::Scale(a, factor) => {
                    Self::accumulate(grads, a, g.len(), |ga| ga.iter_mut().zip(&g).for_each(|(x, y)| *x += factor * y));
                }
                Op::MulConst { a, factor } => {
                    Self::accumulate(grads, *a, g.len(), |ga| {
                        for ((x, y), f) in ga.iter_mut().zip(&g).zip(factor) {
                            *x += y * f;
                        }
                    });
                }
                &Op::Abs(a) => {
                    let src = values[a.0].data();
                    Self::accumulate(grads, a, g.len(), |ga| {
                        for ((x, y), &s) in ga.iter_mut().zip(&g).zip(src) {
                            let sign = if s > 0.0 {
                                1.0
                            } else if s < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *x += sign * y;
                        }
                    });
                }
                &Op::Sigmoid(a) => {
                    let out = values[idx].data();
                    let fudge = if corrupt { 1.5 } else { 1.0 };
                    Self::accumulate(grads, a, g.len(), |ga| {
                        for ((x, y), &s) in ga.iter_mut().zip(&g).zip(out) {
                            *x += fudge * y * s * (1.0 - s);
                        }
                    });
                }
                &Op::Tanh(a) => {
                    let out = values[idx].data();
                    Self::accumulate(grads, a, g.len(), |ga| {
                        for ((x, y), &t) in ga.iter_mut().zip(&g).zip(out) {
                            *x += y * (1.0 - t * t);
                        }
                    });
                }
                &Op::LeakyRelu(a, slope) => {
                    let src = values[a.0].data();
                    Self::accumulate(grads, a, g.len(), |ga| {
                        for ((x, y), &s) in ga.iter_mut().zip(&g).zip(src) {
                            *x += if s >= 0.0 { *y } else { slope * y };
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    let out_shape = values[idx].shape();
                    let (outer, _, inner) = split_axis(out_shape, *axis);
                    let mut offset = 0;
                    let row_len = out_shape[*axis] * inner;
                    for &p in parts {
                        let chunk = values[p.0].shape()[*axis] * inner;
                        if wants(p) {
                            Self::accumulate(grads, p, outer * chunk, |gp| {
                                for o in 0..outer {
                                    let src = &g[o * row_len + offset..o * row_len + offset + chunk];
                                    gp[o * chunk..(o + 1) * chunk]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(x, y)| *x += y);
                                }
                            });
                        }
                        offset += chunk;
                    }
                }
                &Op::Narrow { a, axis, start } => {
                    let src_shape = values[a.0].shape();
                    let (outer, extent, inner) = split_axis(src_shape, axis);
                    let len = values[idx].shape()[axis];
                    Self::accumulate(grads, a, outer * extent * inner, |ga| {
                        for o in 0..outer {
                            let base = (o * extent + start) * inner;
                            ga[base..base + len * inner]
                                .iter_mut()
                                .zip(&g[o * len * inner..(o + 1) * len * inner])
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Gather { table, ids, frozen_row } => {
                    let cols = values[table.0].shape()[1];
                    Self::accumulate(grads, *table, numel(*table), |gt| {
                        for (i, &id) in ids.iter().enumerate() {
                            if Some(id) == *frozen_row {
                                continue;
                            }
                            gt[id * cols..(id + 1) * cols]
                                .iter_mut()
                                .zip(&g[i * cols..(i + 1) * cols])
                                .for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::Select { mask, on, off } => {
                    let cols = values[on.0].shape()[1];
                    for (target, pick) in [(*on, true), (*off, false)] {
                        if !wants(target) {
                            continue;
                        }
                        Self::accumulate(grads, target, g.len(), |gt| {
                            for (i, &m) in mask.iter().enumerate() {
                                if m == pick {
                                    gt[i * cols..(i + 1) * cols]
                                        .iter_mut()
                                        .zip(&g[i * cols..(i + 1) * cols])
                                        .for_each(|(x, y)| *x += y);
                                }
                            }
                        });
                    }
                }
                &Op::BroadcastRows(a) => {
                    let n = numel(a);
                    Self::accumulate(grads, a, n, |ga| {
                        for chunk in g.chunks(n) {
                            ga.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                    });
                }
                Op::MaxPool { steps, argmax } => {
                    let size = g.len();
                    for (slot, (&t, &y)) in argmax.iter().zip(&g).enumerate() {
                        let target = steps[t];
                        if wants(target) {
                            Self::accumulate(grads, target, size, |gt| gt[slot] += y);
                        }
                    }
                }
                &Op::Sum(a) => {
                    let y = g[0];
                    Self::accumulate(grads, a, numel(a), |ga| ga.iter_mut().for_each(|x| *x += y));
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let classes = values[logits.0].shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    Self::accumulate(grads, *logits, probs.len(), |gl| {
                        for (r, &label) in labels.iter().enumerate() {
                            for c in 0..classes {
                                let onehot = if c == label { 1.0 } else { 0.0 };
                                gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                            }
                        }
                    });
                }
            }
            grads[idx] = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = a.dims2().unwrap();
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get2(i, p) * b.get2(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::Shape {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, k, n) in [(3, 4, 2), (5, 7, 3)] {
            let (a, b) = (random(&mut rng, &[m, k]), random(&mut rng, &[k, n]));
            let expected = naive_matmul(&a, &b);
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let c = tape.matmul(va, vb).unwrap();
            for (x, y) in tape.value(c).data().iter().zip(&expected) {
                assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-15);
            }
            // b stored transposed must give the same product
            let mut bt = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b.get2(p, j);
                }
            }
            let vbt = tape.constant(t(&[n, k], &bt));
            let c2 = tape.matmul_nt(va, vbt).unwrap();
            for (x, y) in tape.value(c2).data().iter().zip(&expected) {
                assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn leaky_relu_values_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[5.0, -1.0, 0.0]));
        let y = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(y).data(), &[5.0, -0.01, 0.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.01, 1.0]);
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(th).data(), &[0.0]);

        let x = tape.leaf(t(&[2], &[-3.0, 0.0]));
        let a = tape.abs(x);
        assert_eq!(tape.value(a).data(), &[3.0, 0.0]);
        let total = tape.sum(a);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-1.0, 0.0]);
    }

    #[test]
    fn concat_checks_non_axis_extents() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.concat(&[a, b], 1).is_err());
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).shape(), &[5, 3]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[1, 3], &[0.0, 0.0, 0.0]));
        for label in 0..3 {
            let l = tape.softmax_cross_entropy(logits, &[label]).unwrap();
            assert_relative_eq!(tape.value(l).data()[0], 3f64.ln(), max_relative = 1e-15);
        }
        let peaked = tape.leaf(t(&[1, 3], &[10.0, 0.0, 0.0]));
        let l = tape.softmax_cross_entropy(peaked, &[0]).unwrap();
        // direct scalar evaluation: -ln(e^10 / (e^10 + 2))
        let oracle = -(10f64.exp() / (10f64.exp() + 2.0)).ln();
        assert_relative_eq!(tape.value(l).data()[0], oracle, max_relative = 1e-12);
        assert_relative_eq!(tape.value(l).data()[0], 9.0797e-5, max_relative = 1e-4);

        assert_eq!(
            tape.softmax_cross_entropy(peaked, &[3]).unwrap_err(),
            TensorError::LabelOutOfRange { row: 0, label: 3, classes: 3 }
        );
    }

    #[test]
    fn cross_entropy_survives_large_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(&[1, 3], &[800.0, 0.0, -800.0]));
        let l = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        assert_relative_eq!(tape.value(l).data()[0], 800.0, max_relative = 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(logits).unwrap().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = t(&[2, 3], &[0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let labels = [2, 0];
        let mut tape = Tape::new();
        let v = tape.leaf(logits.clone());
        let l = tape.softmax_cross_entropy(v, &labels).unwrap();
        tape.backward(l).unwrap();
        let probs = softmax_rows(logits.data(), 3);
        for r in 0..2 {
            for c in 0..3 {
                let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                let expected = (probs[r * 3 + c] - onehot) / 2.0;
                assert_relative_eq!(tape.grad(v).unwrap()[r * 3 + c], expected, max_relative = 1e-12);
            }
        }
        let report = grad_check(|tape, v| tape.softmax_cross_entropy(v[0], &labels), &[logits], 1e-5).unwrap();
        assert!(report.max_error() < 1e-7, "{report:?}");
    }

    #[test]
    fn repeated_leaf_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -3.0]);
    }

    #[test]
    fn max_pool_routes_ties_to_first_step() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[2.0, 1.0]));
        let b = tape.leaf(t(&[1, 2], &[2.0, 3.0]));
        let p = tape.max_pool(&[a, b], &[vec![true, true]]).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 3.0]);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn max_pool_rejects_fully_masked_row() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.max_pool(&[a], &[vec![true], vec![false]]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]));
        assert_eq!(tape.backward(a).unwrap_err(), TensorError::NonScalar(vec![2, 2]));
    }

    #[test]
    fn gather_skips_frozen_row() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(&[3, 2], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]));
        let rows = tape.gather_rows(table, &[0, 2, 2], Some(0)).unwrap();
        assert_eq!(tape.value(rows).data(), &[0.0, 0.0, 3.0, 4.0, 3.0, 4.0]);
        let s = tape.sum(rows);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.gather_rows(table, &[3], None).is_err());
    }

    fn check_unary(name: &str, f: impl Fn(&mut Tape, Var) -> Result<Var>, input: Tensor) {
        let report = grad_check(
            |tape, v| {
                let y = f(tape, v[0])?;
                let w = tape.constant(Tensor::new(
                    tape.value(y).shape().to_vec(),
                    (0..tape.value(y).numel()).map(|i| 0.3 + 0.17 * i as f64).collect(),
                )?);
                let z = tape.mul(y, w)?;
                Ok(tape.sum(z))
            },
            &[input],
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-4, "{name}: {report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn every_op_passes_grad_check(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, &[2, 3]);
            check_unary("sigmoid", |t, v| Ok(t.sigmoid(v)), x.clone());
            check_unary("tanh", |t, v| Ok(t.tanh(v)), x.clone());
            check_unary("leaky_relu", |t, v| Ok(t.leaky_relu(v, 0.01)), x.clone());
            check_unary("abs", |t, v| Ok(t.abs(v)), x.clone());
            check_unary("scale", |t, v| Ok(t.scale(v, -1.7)), x.clone());
            check_unary("narrow", |t, v| t.narrow(v, 1, 1, 2), x.clone());
            check_unary("broadcast", |t, v| t.broadcast_rows(v, 3), random(&mut rng, &[1, 3]));
            let other = random(&mut rng, &[2, 3]);
            check_unary("mul", |t, v| { let o = t.constant(other.clone()); t.mul(v, o) }, x.clone());
            check_unary("sub", |t, v| { let o = t.constant(other.clone()); t.sub(o, v) }, x.clone());
            check_unary("concat", |t, v| { let o = t.constant(other.clone()); t.concat(&[o, v, o], 1) }, x.clone());
            check_unary("select", |t, v| { let o = t.constant(other.clone()); t.select_rows(&[false, true], v, o) }, x.clone());
            check_unary("gather", |t, v| t.gather_rows(v, &[1, 0, 1], None), x.clone());
            let w = random(&mut rng, &[4, 3]);
            check_unary("matmul_nt", |t, v| { let o = t.constant(w.clone()); t.matmul_nt(v, o) }, x.clone());
            check_unary("matmul_nt_rhs", |t, v| { let o = t.constant(x.clone()); t.matmul_nt(o, v) }, w.clone());
            let b = random(&mut rng, &[3, 4]);
            check_unary("matmul", |t, v| { let o = t.constant(b.clone()); t.matmul(v, o) }, x.clone());
            check_unary("matmul_rhs", |t, v| { let o = t.constant(x.clone()); t.matmul(o, v) }, b.clone());
            let bias = random(&mut rng, &[3]);
            check_unary("add_row", |t, v| { let o = t.constant(bias.clone()); t.add_row(v, o) }, x.clone());
            check_unary("add_row_bias", |t, v| { let o = t.constant(x.clone()); t.add_row(o, v) }, bias.clone());
            let y = random(&mut rng, &[2, 3]);
            check_unary("max_pool", |t, v| { let o = t.constant(y.clone()); t.max_pool(&[v, o], &[vec![true, true], vec![true, false]]) }, x.clone());
        }

        #[test]
        fn softmax_rows_are_distributions(logits in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let p = softmax_rows(&logits, 4);
            for row in p.chunks(4) {
                prop_assert!(row.iter().all(|&x| x > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn matmul_agrees_with_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random(&mut rng, &[5, 7]), random(&mut rng, &[7, 3]));
            let expected = naive_matmul(&a, &b);
            let mut tape = Tape::new();
            let (va, vb) = (tape.constant(a), tape.constant(b));
            let c = tape.matmul(va, vb).unwrap();
            for (x, y) in tape.value(c).data().iter().zip(&expected) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-3));
            }
        }
    }
}
