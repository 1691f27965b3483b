//! Reverse-mode tape over row-major matrices.
//!
//! Every value is a matrix; scalars are `1 × 1`. Sequence tensors are stored
//! with one row per (sequence, position), sequence-major, so projections run
//! as a single product over the whole batch. The recurrence itself is one
//! fused node whose backward pass walks time in reverse.

use thiserror::Error;

use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error(transparent)]
    Shape(#[from] TensorError),
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("loss node must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batch of sequences on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub len: usize,
}

impl SeqShape {
    pub fn rows(self) -> usize {
        self.batch * self.len
    }
}

/// Inputs of the fused recurrence node.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs {
    /// `N × d_k` keys.
    pub k: Var,
    /// `N × d_v` values.
    pub v: Var,
    /// `N × d_k` queries, already normalized.
    pub q: Var,
    /// `N × d_k` per-row decay, or `N × 1` scalar decay; `None` for no decay.
    pub decay: Option<Var>,
    /// `N × 1` write coefficients.
    pub beta: Var,
    /// Delta-rule write (`β k (v − S̃ᵀk)ᵀ`) instead of additive (`β k vᵀ`).
    pub delta: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Embed { table: Var, ids: Vec<usize> },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Silu(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    RowNormalize { x: Var, inv_norm: Vec<f64> },
    RowSumSq(Var),
    HalfSumSq(Var),
    Tile { x: Var },
    ShortConv { x: Var, w: Var, shape: SeqShape },
    Scan { inputs: ScanInputs, shape: SeqShape, residuals: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Matrix, count: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// A computation recorded in evaluation order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of `v`; zeros of the right shape if the loss does not
    /// depend on it.
    pub fn get(&self, tape: &Tape, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }

    pub fn take(&mut self, tape: &Tape, v: Var) -> Matrix {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TapeError {
    TapeError::Invalid {
        op,
        reason: reason.into(),
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        }
        .into())
    }
}

fn map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_vec_unchecked(m.rows(), m.cols(), m.as_slice().iter().map(|&x| f(x)).collect())
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec_unchecked(
        a.rows(),
        a.cols(),
        a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub const RMS_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= t.rows() {
                return Err(invalid("embed", format!("id {id} out of range {}", t.rows())));
            }
            out.extend_from_slice(t.row(id));
        }
        let value = Matrix::from_vec_unchecked(ids.len(), d, out);
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            value,
            &[table],
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let value = zip(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(Op::Div(a, b), value, &[a, b]))
    }

    /// `a + 1 rowᵀ` for a `1 × n` row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != am.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: am.shape(),
                right: r.shape(),
            }
            .into());
        }
        let mut value = am.clone();
        let n = am.cols();
        for chunk in value.as_mut_slice().chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r.as_slice()) {
                *x += b;
            }
        }
        Ok(self.push(Op::AddRow(a, row), value, &[a, row]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = map(self.value(a), |x| x + c);
        self.push(Op::AddScalar(a), value, &[a])
    }

    /// `a · s` for a `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(invalid("scale_by", "scale must be 1x1"));
        }
        let c = self.value(s).get(0, 0);
        let value = self.value(a).scaled(c);
        Ok(self.push(Op::ScaleBy(a, s), value, &[a, s]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = map(self.value(a), sigmoid);
        self.push(Op::Sigmoid(a), value, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = map(self.value(a), |x| x * sigmoid(x));
        self.push(Op::Silu(a), value, &[a])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = map(self.value(x), |v| v.clamp(lo, hi));
        self.push(Op::Clamp { x, lo, hi }, value, &[x])
    }

    /// Row-wise `x / rms(x) ⊙ gain` with a `1 × n` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xm, g) = (self.value(x), self.value(gain));
        if g.shape() != (1, xm.cols()) {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                left: xm.shape(),
                right: g.shape(),
            }
            .into());
        }
        let n = xm.cols();
        let mut value = xm.clone();
        let mut inv_rms = Vec::with_capacity(xm.rows());
        for row in value.as_mut_slice().chunks_mut(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let r = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms.push(r);
            for (v, &gj) in row.iter_mut().zip(g.as_slice()) {
                *v *= r * gj;
            }
        }
        Ok(self.push(Op::RmsNorm { x, gain, inv_rms }, value, &[x, gain]))
    }

    /// Row-wise `x / ‖x‖`; zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let n = xm.cols();
        let mut value = xm.clone();
        let mut inv_norm = Vec::with_capacity(xm.rows());
        for row in value.as_mut_slice().chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = if norm == 0.0 { 0.0 } else { 1.0 / norm };
            inv_norm.push(r);
            for v in row.iter_mut() {
                *v *= r;
            }
        }
        self.push(Op::RowNormalize { x, inv_norm }, value, &[x])
    }

    /// `N × 1` column of squared row norms.
    pub fn row_sum_sq(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let n = xm.cols();
        let data = xm.as_slice().chunks(n).map(|r| r.iter().map(|v| v * v).sum()).collect();
        let value = Matrix::from_vec_unchecked(xm.rows(), 1, data);
        self.push(Op::RowSumSq(x), value, &[x])
    }

    /// `½‖x‖²_F` as a `1 × 1` node.
    pub fn half_sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).as_slice().iter().map(|v| v * v).sum::<f64>();
        self.push(Op::HalfSumSq(x), Matrix::from_vec_unchecked(1, 1, vec![0.5 * s]), &[x])
    }

    /// Repeats an `N × 1` column `width` times.
    pub fn tile(&mut self, x: Var, width: usize) -> Result<Var> {
        let xm = self.value(x);
        if xm.cols() != 1 {
            return Err(invalid("tile", "input must be a column"));
        }
        let value = Matrix::from_fn(xm.rows(), width, |i, _| xm.get(i, 0));
        Ok(self.push(Op::Tile { x }, value, &[x]))
    }

    /// Depthwise causal convolution of width two along time:
    /// `y_t = w₀ ⊙ x_t + w₁ ⊙ x_{t−1}` with `x_{−1} = 0`, `w` of shape `2 × n`.
    pub fn short_conv(&mut self, x: Var, w: Var, shape: SeqShape) -> Result<Var> {
        let (xm, wm) = (self.value(x), self.value(w));
        if xm.rows() != shape.rows() || wm.shape() != (2, xm.cols()) {
            return Err(TensorError::ShapeMismatch {
                op: "short_conv",
                left: xm.shape(),
                right: wm.shape(),
            }
            .into());
        }
        let n = xm.cols();
        let (w0, w1) = (wm.row(0), wm.row(1));
        let mut value = Matrix::zeros(xm.rows(), n);
        for b in 0..shape.batch {
            for t in 0..shape.len {
                let r = b * shape.len + t;
                let out = value.row_mut(r);
                let cur = xm.row(r);
                for j in 0..n {
                    out[j] = w0[j] * cur[j];
                }
                if t > 0 {
                    let prev = xm.row(r - 1);
                    for j in 0..n {
                        out[j] += w1[j] * prev[j];
                    }
                }
            }
        }
        Ok(self.push(Op::ShortConv { x, w, shape }, value, &[x, w]))
    }

    /// Fused recurrence over every sequence from a zero state. Row
    /// `b·L + t` of the output is the readout `S_tᵀ q_t` after the write.
    pub fn scan(&mut self, inputs: ScanInputs, shape: SeqShape) -> Result<Var> {
        let (km, vm, qm, bm) = (
            self.value(inputs.k),
            self.value(inputs.v),
            self.value(inputs.q),
            self.value(inputs.beta),
        );
        let n = shape.rows();
        let (d_k, d_v) = (km.cols(), vm.cols());
        let rows_ok = km.rows() == n && vm.rows() == n && qm.rows() == n && bm.rows() == n;
        if !rows_ok || qm.cols() != d_k || bm.cols() != 1 {
            return Err(invalid("scan", "inconsistent input shapes"));
        }
        let dm = match inputs.decay {
            Some(d) => {
                let dm = self.value(d);
                if dm.rows() != n || !(dm.cols() == 1 || dm.cols() == d_k) {
                    return Err(invalid("scan", "decay must be N x 1 or N x d_k"));
                }
                Some(dm)
            }
            None => None,
        };
        let mut out = Matrix::zeros(n, d_v);
        let mut residuals = vec![0.0; n * d_v];
        let mut state = vec![0.0; d_k * d_v];
        for b in 0..shape.batch {
            state.fill(0.0);
            for t in 0..shape.len {
                let r = b * shape.len + t;
                if let Some(dm) = dm {
                    apply_decay(&mut state, dm.row(r), d_v);
                }
                let k = km.row(r);
                let e = &mut residuals[r * d_v..(r + 1) * d_v];
                e.copy_from_slice(vm.row(r));
                if inputs.delta {
                    for (i, &ki) in k.iter().enumerate() {
                        for (ej, &s) in e.iter_mut().zip(&state[i * d_v..(i + 1) * d_v]) {
                            *ej -= ki * s;
                        }
                    }
                }
                let beta = bm.get(r, 0);
                for (i, &ki) in k.iter().enumerate() {
                    let c = beta * ki;
                    for (s, &ej) in state[i * d_v..(i + 1) * d_v].iter_mut().zip(e.iter()) {
                        *s += c * ej;
                    }
                }
                let o = out.row_mut(r);
                for (i, &qi) in qm.row(r).iter().enumerate() {
                    for (oj, &s) in o.iter_mut().zip(&state[i * d_v..(i + 1) * d_v]) {
                        *oj += qi * s;
                    }
                }
            }
        }
        let mut parents = vec![inputs.k, inputs.v, inputs.q, inputs.beta];
        parents.extend(inputs.decay);
        Ok(self.push(
            Op::Scan {
                inputs,
                shape,
                residuals,
            },
            out,
            &parents,
        ))
    }

    /// Mean negative log-likelihood over rows with `mask[i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lm = self.value(logits);
        let (n, v) = lm.shape();
        if targets.len() != n || mask.len() != n {
            return Err(invalid("cross_entropy", "targets and mask must have one entry per row"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(invalid("cross_entropy", "no scored positions"));
        }
        let mut probs = Matrix::zeros(n, v);
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(invalid("cross_entropy", format!("target {} out of range {v}", targets[i])));
            }
            let row = lm.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let p = probs.row_mut(i);
            let mut z = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - m).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            total += z.ln() + m - row[targets[i]];
        }
        let value = Matrix::from_vec_unchecked(1, 1, vec![total / count as f64]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            value,
            &[logits],
        ))
    }

    /// Reverse sweep from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(TapeError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec_unchecked(1, 1, vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Embed { table, ids } => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &b) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, zip(g, bv, |x, y| x / y));
                }
                if self.needs(*b) {
                    // d(a/b)/db = −(a/b)/b
                    let q = zip(&node.value, bv, |x, y| x / y);
                    self.accumulate(grads, *b, zip(g, &q, |x, y| -x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    let n = g.cols();
                    let mut gr = vec![0.0; n];
                    for chunk in g.as_slice().chunks(n) {
                        for (a, &b) in gr.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *row, Matrix::from_vec_unchecked(1, n, gr));
                }
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).get(0, 0);
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.scaled(c));
                }
                if self.needs(*s) {
                    let dot = g.frobenius_inner(self.value(*a))?;
                    self.accumulate(grads, *s, Matrix::from_vec_unchecked(1, 1, vec![dot]));
                }
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, zip(g, &node.value, |x, s| x * s * (1.0 - s)));
            }
            Op::Silu(a) => {
                let d = map(self.value(*a), |x| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *a, zip(g, &d, |x, y| x * y));
            }
            Op::Clamp { x, lo, hi } => {
                let gx = zip(g, self.value(*x), |gi, xi| if xi < *lo || xi > *hi { 0.0 } else { gi });
                self.accumulate(grads, *x, gx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xm, gm) = (self.value(*x), self.value(*gain));
                let n = xm.cols();
                if self.needs(*gain) {
                    let mut gg = vec![0.0; n];
                    for (&ri, (xr, gr)) in inv_rms.iter().zip(xm.as_slice().chunks(n).zip(g.as_slice().chunks(n))) {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j] * ri;
                        }
                    }
                    self.accumulate(grads, *gain, Matrix::from_vec_unchecked(1, n, gg));
                }
                if self.needs(*x) {
                    // y = x r ⊙ γ,  r = (mean x² + ε)^(-1/2)
                    // dx = r (γ⊙g) − x r³ ⟨γ⊙g, x⟩ / n
                    let mut gx = Matrix::zeros(xm.rows(), n);
                    for (i, &ri) in inv_rms.iter().enumerate() {
                        let (xr, gr) = (xm.row(i), g.row(i));
                        let dot: f64 = (0..n).map(|j| gm.get(0, j) * gr[j] * xr[j]).sum();
                        let c = ri * ri * ri * dot / n as f64;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = ri * gm.get(0, j) * gr[j] - c * xr[j];
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::RowNormalize { x, inv_norm } => {
                // y = x/‖x‖,  dx = (g − y ⟨g, y⟩)/‖x‖
                let n = node.value.cols();
                let mut gx = Matrix::zeros(node.value.rows(), n);
                for (i, &r) in inv_norm.iter().enumerate() {
                    let (y, gr) = (node.value.row(i), g.row(i));
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = r * (gr[j] - y[j] * dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RowSumSq(x) => {
                let xm = self.value(*x);
                let gx = Matrix::from_fn(xm.rows(), xm.cols(), |i, j| 2.0 * g.get(i, 0) * xm.get(i, j));
                self.accumulate(grads, *x, gx);
            }
            Op::HalfSumSq(x) => {
                self.accumulate(grads, *x, self.value(*x).scaled(g.get(0, 0)));
            }
            Op::Tile { x } => {
                let n = g.cols();
                let data = g.as_slice().chunks(n).map(|r| r.iter().sum()).collect();
                self.accumulate(grads, *x, Matrix::from_vec_unchecked(g.rows(), 1, data));
            }
            Op::ShortConv { x, w, shape } => self.backprop_conv(*x, *w, *shape, g, grads),
            Op::Scan {
                inputs,
                shape,
                residuals,
            } => self.backprop_scan(inputs, *shape, residuals, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let scale = g.get(0, 0) / *count as f64;
                let mut gl = probs.clone();
                for i in 0..gl.rows() {
                    let row = gl.row_mut(i);
                    if mask[i] {
                        row[targets[i]] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
        }
        Ok(())
    }

    fn backprop_conv(&self, x: Var, w: Var, shape: SeqShape, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (xm, wm) = (self.value(x), self.value(w));
        let n = xm.cols();
        let mut gx = Matrix::zeros(xm.rows(), n);
        let mut gw = Matrix::zeros(2, n);
        for b in 0..shape.batch {
            for t in 0..shape.len {
                let r = b * shape.len + t;
                let gr = g.row(r);
                for j in 0..n {
                    gx.row_mut(r)[j] += wm.get(0, j) * gr[j];
                }
                for (j, gwj) in gw.row_mut(0).iter_mut().enumerate() {
                    *gwj += gr[j] * xm.get(r, j);
                }
                if t > 0 {
                    for j in 0..n {
                        gx.row_mut(r - 1)[j] += wm.get(1, j) * gr[j];
                    }
                    for (j, gwj) in gw.row_mut(1).iter_mut().enumerate() {
                        *gwj += gr[j] * xm.get(r - 1, j);
                    }
                }
            }
        }
        self.accumulate(grads, x, gx);
        self.accumulate(grads, w, gw);
    }

    /// Backpropagation through time for [`Tape::scan`]. States are rebuilt
    /// forward per sequence and then walked in reverse.
    fn backprop_scan(
        &self,
        inputs: &ScanInputs,
        shape: SeqShape,
        residuals: &[f64],
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (km, vm, qm, bm) = (
            self.value(inputs.k),
            self.value(inputs.v),
            self.value(inputs.q),
            self.value(inputs.beta),
        );
        let dm = inputs.decay.map(|d| self.value(d));
        let (d_k, d_v) = (km.cols(), vm.cols());
        let sz = d_k * d_v;
        let n = shape.rows();
        let mut gk = Matrix::zeros(n, d_k);
        let mut gv = Matrix::zeros(n, d_v);
        let mut gq = Matrix::zeros(n, d_k);
        let mut gb = Matrix::zeros(n, 1);
        let mut gd = dm.map(|d| Matrix::zeros(n, d.cols()));

        // states[t] is the state after step t of the current sequence
        let mut states = vec![0.0; shape.len * sz];
        let mut s_tilde = vec![0.0; sz];
        let mut ds = vec![0.0; sz];
        let mut de = vec![0.0; d_v];
        let mut dse = vec![0.0; d_k];
        for b in 0..shape.batch {
            let base = b * shape.len;
            for t in 0..shape.len {
                let r = base + t;
                let (prev, cur) = states.split_at_mut(t * sz);
                let cur = &mut cur[..sz];
                if t > 0 {
                    cur.copy_from_slice(&prev[(t - 1) * sz..]);
                } else {
                    cur.fill(0.0);
                }
                if let Some(dm) = dm {
                    apply_decay(cur, dm.row(r), d_v);
                }
                let c = bm.get(r, 0);
                let e = &residuals[r * d_v..(r + 1) * d_v];
                for (i, &ki) in km.row(r).iter().enumerate() {
                    for (s, &ej) in cur[i * d_v..(i + 1) * d_v].iter_mut().zip(e) {
                        *s += c * ki * ej;
                    }
                }
            }
            ds.fill(0.0);
            for t in (0..shape.len).rev() {
                let r = base + t;
                let s_after = &states[t * sz..(t + 1) * sz];
                let (k, q, go) = (km.row(r), qm.row(r), g.row(r));
                let beta = bm.get(r, 0);
                let e = &residuals[r * d_v..(r + 1) * d_v];
                // o = S'ᵀ q
                for (i, &qi) in q.iter().enumerate() {
                    let row = &s_after[i * d_v..(i + 1) * d_v];
                    gq.row_mut(r)[i] = row.iter().zip(go).map(|(a, b)| a * b).sum();
                    for (d, &gj) in ds[i * d_v..(i + 1) * d_v].iter_mut().zip(go) {
                        *d += qi * gj;
                    }
                }
                // S' = S̃ + β k eᵀ
                for i in 0..d_k {
                    dse[i] = ds[i * d_v..(i + 1) * d_v].iter().zip(e).map(|(a, b)| a * b).sum();
                }
                gb.set(r, 0, k.iter().zip(&dse).map(|(a, b)| a * b).sum());
                de.fill(0.0);
                for (i, &ki) in k.iter().enumerate() {
                    for (d, &x) in de.iter_mut().zip(&ds[i * d_v..(i + 1) * d_v]) {
                        *d += beta * ki * x;
                    }
                }
                let gkr = gk.row_mut(r);
                for i in 0..d_k {
                    gkr[i] = beta * dse[i];
                }
                gv.row_mut(r).copy_from_slice(&de);
                // S̃ = S' − β k eᵀ
                for (i, &ki) in k.iter().enumerate() {
                    for ((st, &sa), &ej) in s_tilde[i * d_v..(i + 1) * d_v]
                        .iter_mut()
                        .zip(&s_after[i * d_v..(i + 1) * d_v])
                        .zip(e)
                    {
                        *st = sa - beta * ki * ej;
                    }
                }
                if inputs.delta {
                    // e = v − S̃ᵀk
                    for (i, &ki) in k.iter().enumerate() {
                        let row = &s_tilde[i * d_v..(i + 1) * d_v];
                        gkr[i] -= row.iter().zip(&de).map(|(a, b)| a * b).sum::<f64>();
                        for (d, &dej) in ds[i * d_v..(i + 1) * d_v].iter_mut().zip(&de) {
                            *d -= ki * dej;
                        }
                    }
                }
                // S̃ = Diag(d) S_prev
                if let (Some(dm), Some(gd)) = (dm, gd.as_mut()) {
                    let drow = dm.row(r);
                    let prev: &[f64] = if t > 0 { &states[(t - 1) * sz..t * sz] } else { &[] };
                    let gdr = gd.row_mut(r);
                    gdr.fill(0.0);
                    for i in 0..d_k {
                        let a = if drow.len() == 1 { drow[0] } else { drow[i] };
                        let slot = if drow.len() == 1 { 0 } else { i };
                        let dsr = &mut ds[i * d_v..(i + 1) * d_v];
                        if t > 0 {
                            gdr[slot] += dsr.iter().zip(&prev[i * d_v..(i + 1) * d_v]).map(|(x, y)| x * y).sum::<f64>();
                        }
                        for d in dsr.iter_mut() {
                            *d *= a;
                        }
                    }
                }
            }
        }
        self.accumulate(grads, inputs.k, gk);
        self.accumulate(grads, inputs.v, gv);
        self.accumulate(grads, inputs.q, gq);
        self.accumulate(grads, inputs.beta, gb);
        if let (Some(d), Some(gd)) = (inputs.decay, gd) {
            self.accumulate(grads, d, gd);
        }
    }
}

fn apply_decay(state: &mut [f64], decay: &[f64], d_v: usize) {
    if decay.len() == 1 {
        let a = decay[0];
        for s in state.iter_mut() {
            *s *= a;
        }
    } else {
        for (row, &a) in state.chunks_mut(d_v).zip(decay) {
            for s in row {
                *s *= a;
            }
        }
    }
}
