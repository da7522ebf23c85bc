//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! Every operation appends a node to the [`Tape`]; nodes only reference
//! earlier nodes, so the recording order is a topological order and
//! [`Tape::backward`] simply walks it in reverse. Values on the tape are
//! always matrices: 1-D parameters are recorded as a single row.

use std::f64::consts::LN_2;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{DrfError, Result};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before logs.
pub const BCE_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Rsqrt(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Bce { p: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf that requires grad.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(var, id) in &self.params {
            if let Some(g) = self.wrt(var) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> DrfError {
    DrfError::Shape { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (+)= a · b` for row-major `a: m×k`, `b: k×n`. Transposes via strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index the strides can reach for the
    // given m, k, n, which the callers guarantee from the tensor shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], len: usize, v: Var) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulScalar(a, b) => self.rg(*a) || self.rg(*b),
            Op::Affine(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Rsqrt(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a) => self.rg(*a),
            Op::ConcatCols(vs) | Op::StackRows(vs) => vs.iter().any(|v| self.rg(*v)),
            Op::BatchNorm { x, gamma, beta, .. } => self.rg(*x) || self.rg(*gamma) || self.rg(*beta),
            Op::Bce { p, .. } => self.rg(*p),
        };
        self.nodes.push(Node { rows, cols, value, op, param: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn leaf(&mut self, t: &Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        let (r, c) = t.rows_cols();
        let v = self.push(r, c, t.data().to_vec(), Op::Leaf);
        let node = &mut self.nodes[v.0];
        node.requires_grad = requires_grad;
        node.param = param;
        v
    }

    /// Records a constant (no gradient is propagated to it).
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false, None)
    }

    /// Records a `rows × cols` constant from raw data.
    pub fn constant_raw(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(shape_err("constant", format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    /// Records a leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true, None)
    }

    /// Records a snapshot of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.leaf(store.get(id), trainable, Some(id))
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let (r, c) = self.dims(v);
        [r, c]
    }

    pub fn values(&self, v: Var) -> &[f64] {
        self.val(v)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::new(vec![r, c], self.val(v).to_vec()).expect("node shape is consistent")
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.val(v)[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(a), (k as isize, 1), self.val(b), (n as isize, 1), &mut out, false);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        let (r, c) = self.same_shape(op, a, b)?;
        let out = self.val(a).iter().zip(self.val(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(r, c, out, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_check(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (r, c) = self.dims(x);
        let (rr, rc) = self.dims(row);
        if rr != 1 || rc != c {
            return Err(shape_err(op, format!("{r}x{c} with row {rr}x{rc}")));
        }
        Ok((r, c))
    }

    /// Adds a `1×c` row to every row of `x` (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_check("add_row", x, row)?;
        let rv = self.val(row);
        let out = self.val(x).chunks_exact(c.max(1)).flat_map(|xr| xr.iter().zip(rv).map(|(a, b)| a + b)).collect();
        Ok(self.push(r, c, out, Op::AddRow(x, row)))
    }

    /// Multiplies every row of `x` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_check("mul_row", x, row)?;
        let rv = self.val(row);
        let out = self.val(x).chunks_exact(c.max(1)).flat_map(|xr| xr.iter().zip(rv).map(|(a, b)| a * b)).collect();
        Ok(self.push(r, c, out, Op::MulRow(x, row)))
    }

    /// Multiplies `x` by a `1×1` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(shape_err("mul_scalar", format!("scalar operand has shape {:?}", self.dims(s))));
        }
        let (r, c) = self.dims(x);
        let sv = self.val(s)[0];
        let out = self.val(x).iter().map(|v| v * sv).collect();
        Ok(self.push(r, c, out, Op::MulScalar(x, s)))
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.dims(x);
        let out = self.val(x).iter().map(|v| scale * v + shift).collect();
        self.push(r, c, out, Op::Affine(x, scale))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.val(x).iter().map(|v| v.tanh()).collect();
        self.push(r, c, out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.val(x).iter().map(|v| sigmoid(*v)).collect();
        self.push(r, c, out, Op::Sigmoid(x))
    }

    /// Elementwise `x^(-1/2)`; requires strictly positive input.
    pub fn rsqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.val(x).iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(DrfError::invalid(format!("rsqrt of non-positive value {bad}")));
        }
        let (r, c) = self.dims(x);
        let out = self.val(x).iter().map(|v| 1.0 / v.sqrt()).collect();
        Ok(self.push(r, c, out, Op::Rsqrt(x)))
    }

    /// Concatenates along columns; all parts need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|p| self.dims(*p).0).ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        if let Some(p) = parts.iter().find(|p| self.dims(**p).0 != r) {
            return Err(shape_err("concat", format!("row count {} vs {r}", self.dims(*p).0)));
        }
        let c: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                let pc = self.dims(*p).1;
                out.extend_from_slice(&self.val(*p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > c {
            return Err(shape_err("slice", format!("columns {start}..{end} of {r}x{c}")));
        }
        let w = end - start;
        let xv = self.val(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + end]);
        }
        Ok(self.push(r, w, out, Op::SliceCols(x, start)))
    }

    /// Stacks parts vertically; all parts need the same column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|p| self.dims(*p).1).ok_or_else(|| shape_err("stack_rows", "no inputs".into()))?;
        if let Some(p) = parts.iter().find(|p| self.dims(**p).1 != c) {
            return Err(shape_err("stack_rows", format!("column count {} vs {c}", self.dims(*p).1)));
        }
        let r: usize = parts.iter().map(|p| self.dims(*p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for p in parts {
            out.extend_from_slice(self.val(*p));
        }
        Ok(self.push(r, c, out, Op::StackRows(parts.to_vec())))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start >= end || end > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{end} of {r}x{c}")));
        }
        let out = self.val(x)[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, out, Op::SliceRows(x, start)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.val(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(1, 1, vec![s], Op::Mean(x))
    }

    /// Column means over rows: `r×c → 1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![0.0; c];
        for row in self.val(x).chunks_exact(c.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r.max(1) as f64);
        self.push(1, c, out, Op::MeanRows(x))
    }

    /// Training-mode batch normalisation over rows. Returns the output and
    /// the per-column batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (r, c) = self.dims(x);
        for p in [gamma, beta] {
            if self.dims(p) != (1, c) {
                return Err(shape_err("batch_norm", format!("affine shape {:?} for {c} features", self.dims(p))));
            }
        }
        if r == 0 {
            return Err(shape_err("batch_norm", "empty batch".into()));
        }
        let xv = self.val(x);
        let n = r as f64;
        let mut mean = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for row in xv.chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.val(gamma);
        let b = self.val(beta);
        let mut xhat = Vec::with_capacity(r * c);
        let mut out = Vec::with_capacity(r * c);
        for row in xv.chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let v = self.push(r, c, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((v, mean, var))
    }

    /// Binary cross entropy in bits, summed over columns and averaged over rows.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let (r, c) = self.dims(p);
        if targets.len() != r * c {
            return Err(shape_err("bce", format!("{} targets for {r}x{c} predictions", targets.len())));
        }
        let pv = self.val(p);
        let mut total = 0.0;
        for (q, t) in pv.iter().zip(targets) {
            let qc = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if !(0.0..=1.0).contains(&qc) {
                return Err(DrfError::invalid(format!("probability {q} out of range")));
            }
            total -= t * qc.log2() + (1.0 - t) * (1.0 - qc).log2();
        }
        let loss = total / r.max(1) as f64;
        Ok(self.push(1, 1, vec![loss], Op::Bce { p, targets: targets.to_vec() }))
    }

    /// Reverse pass from a `1×1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(DrfError::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| n.param.filter(|_| n.requires_grad).map(|p| (Var(i), p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Backward pass followed by accumulation into the parameter store.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                if self.rg(*a) {
                    let ga = accumulate(grads, m * k, *a);
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, (n as isize, 1), self.val(*b), (1, n as isize), ga, true);
                }
                if self.rg(*b) {
                    let gb = accumulate(grads, k * n, *b);
                    // dB = Aᵀ · dC
                    gemm(k, m, n, self.val(*a), (1, k as isize), g, (n as isize, 1), gb, true);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        accumulate(grads, len(v), v).iter_mut().zip(g).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, len(*a), *a).iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                if self.rg(*b) {
                    accumulate(grads, len(*b), *b).iter_mut().zip(g).for_each(|(o, d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.val(*b);
                    let ga = accumulate(grads, bv.len(), *a);
                    for ((o, d), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += d * y;
                    }
                }
                if self.rg(*b) {
                    let av = self.val(*a);
                    let gb = accumulate(grads, av.len(), *b);
                    for ((o, d), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                }
            }
            Op::AddRow(x, row) => {
                let c = node.cols.max(1);
                if self.rg(*x) {
                    accumulate(grads, len(*x), *x).iter_mut().zip(g).for_each(|(o, d)| *o += d);
                }
                if self.rg(*row) {
                    let gr = accumulate(grads, c, *row);
                    for gs in g.chunks_exact(c) {
                        gr.iter_mut().zip(gs).for_each(|(o, d)| *o += d);
                    }
                }
            }
            Op::MulRow(x, row) => {
                let c = node.cols.max(1);
                if self.rg(*x) {
                    let rv = self.val(*row);
                    let gx = accumulate(grads, len(*x), *x);
                    for (gxs, gs) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            gxs[j] += gs[j] * rv[j];
                        }
                    }
                }
                if self.rg(*row) {
                    let xv = self.val(*x);
                    let gr = accumulate(grads, c, *row);
                    for (xs, gs) in xv.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            gr[j] += gs[j] * xs[j];
                        }
                    }
                }
            }
            Op::MulScalar(x, s) => {
                if self.rg(*x) {
                    let sv = self.val(*s)[0];
                    accumulate(grads, len(*x), *x).iter_mut().zip(g).for_each(|(o, d)| *o += d * sv);
                }
                if self.rg(*s) {
                    let dot: f64 = self.val(*x).iter().zip(g).map(|(a, b)| a * b).sum();
                    accumulate(grads, 1, *s)[0] += dot;
                }
            }
            Op::Affine(x, scale) => {
                if self.rg(*x) {
                    accumulate(grads, len(*x), *x).iter_mut().zip(g).for_each(|(o, d)| *o += d * scale);
                }
            }
            Op::Tanh(x) => {
                let gx = accumulate(grads, node.value.len(), *x);
                for ((o, d), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *o += d * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                let gx = accumulate(grads, node.value.len(), *x);
                for ((o, d), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *o += d * y * (1.0 - y);
                }
            }
            Op::Rsqrt(x) => {
                let gx = accumulate(grads, node.value.len(), *x);
                for ((o, d), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *o += -0.5 * d * y * y * y;
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.cols;
                let mut offset = 0;
                for p in parts {
                    let pc = self.dims(*p).1;
                    if self.rg(*p) {
                        let gp = accumulate(grads, node.rows * pc, *p);
                        for i in 0..node.rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * c + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.dims(*x);
                let w = node.cols;
                let gx = accumulate(grads, r * c, *x);
                for i in 0..r {
                    for j in 0..w {
                        gx[i * c + start + j] += g[i * w + j];
                    }
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = len(*p);
                    if self.rg(*p) {
                        accumulate(grads, n, *p).iter_mut().zip(&g[offset..offset + n]).for_each(|(o, d)| *o += d);
                    }
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let c = node.cols;
                let gx = accumulate(grads, len(*x), *x);
                gx[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(o, d)| *o += d);
            }
            Op::Sum(x) => {
                accumulate(grads, len(*x), *x).iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(x) => {
                let n = len(*x);
                let d = g[0] / n.max(1) as f64;
                accumulate(grads, n, *x).iter_mut().for_each(|o| *o += d);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x);
                let gx = accumulate(grads, r * c, *x);
                for row in gx.chunks_exact_mut(c.max(1)) {
                    for j in 0..c {
                        row[j] += g[j] / r as f64;
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (r, c) = self.dims(*x);
                let n = r as f64;
                let gv = self.val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (gs, hs) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_dy[j] += gs[j];
                        sum_dy_xhat[j] += gs[j] * hs[j];
                    }
                }
                if self.rg(*gamma) {
                    accumulate(grads, c, *gamma).iter_mut().zip(&sum_dy_xhat).for_each(|(o, d)| *o += d);
                }
                if self.rg(*beta) {
                    accumulate(grads, c, *beta).iter_mut().zip(&sum_dy).for_each(|(o, d)| *o += d);
                }
                if self.rg(*x) {
                    let gx = accumulate(grads, r * c, *x);
                    for ((gxs, gs), hs) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            let k = gv[j] * inv_std[j] / n;
                            gxs[j] += k * (n * gs[j] - sum_dy[j] - hs[j] * sum_dy_xhat[j]);
                        }
                    }
                }
            }
            Op::Bce { p, targets } => {
                let (r, _) = self.dims(*p);
                let scale = g[0] / (r.max(1) as f64 * LN_2);
                let pv = self.val(*p);
                let gp = accumulate(grads, pv.len(), *p);
                // Gradient is taken at the clamped probability.
                for ((o, q), t) in gp.iter_mut().zip(pv).zip(targets) {
                    let qc = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    *o += -scale * (t / qc - (1.0 - t) / (1.0 - qc));
                }
            }
        }
    }
}
