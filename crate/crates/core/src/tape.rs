//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every forward pass in the crate is written once against [`Graph`]. The
//! plain-matrix entry points build a graph of constants and read values
//! back; training registers parameters as differentiable leaves and calls
//! [`Graph::backward`].

use crate::error::{Error, Result};
use crate::numkernel::{self, matmul, matmul_nt, matmul_tn, Matrix};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const PROB_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    /// `out[k] = src[index[k]]` with flat indices into the source.
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    MaskedMeanRows(Var, Vec<bool>),
    NegLogPick {
        x: Var,
        class: usize,
        clamped: bool,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// A recording of matrix operations that can be differentiated in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every differentiable node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape { op, left: a.shape(), right: b.shape() }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds the `1 × cols` row `bias` to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    pub fn div_scalar(&mut self, x: Var, divisor: f64) -> Var {
        let value = self.value(x).map(|v| v / divisor);
        let ng = self.ng(x);
        self.push(value, Op::DivScalar(x, divisor), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = numkernel::relu_map(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = numkernel::sigmoid_map(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = numkernel::softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Row softmax where masked-out columns receive weight exactly zero.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let value = numkernel::softmax_rows_masked(self.value(x), mask)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::MaskedSoftmax(x), ng))
    }

    /// Builds a `rows × cols` matrix whose entry `(r, c)` is read from
    /// `src` at position `pick(r, c)`.
    pub fn gather(&mut self, src: Var, rows: usize, cols: usize, pick: impl Fn(usize, usize) -> (usize, usize)) -> Result<Var> {
        let source = self.value(src);
        let (sr, sc) = source.shape();
        let mut index = Vec::with_capacity(rows * cols);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (i, j) = pick(r, c);
                if i >= sr || j >= sc {
                    return Err(Error::InvalidArgument(format!("gather index ({i}, {j}) outside {sr}x{sc} source")));
                }
                index.push(i * sc + j);
                data.push(source.data()[i * sc + j]);
            }
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let ng = self.ng(src);
        Ok(self.push(value, Op::Gather(src, index), ng))
    }

    /// Row lookup: output row `k` is `table` row `ids[k]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (k, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::TokenOutOfRange { id, vocab_size: t.rows() });
            }
            out.row_mut(k).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceCols(x, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row-wise layer normalization with `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, d) {
            return Err(shape_err("layer_norm gain", xv, g));
        }
        if b.shape() != (1, d) {
            return Err(shape_err("layer_norm bias", xv, b));
        }
        let mut normalized = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (c, &x) in row.iter().enumerate() {
                let h = (x - mean) * is;
                normalized.set(r, c, h);
                out.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, normalized, inv_std }, ng))
    }

    /// Mean over the rows whose mask entry is `true`, as a `1 × cols` row.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.rows() {
            return Err(Error::Shape { op: "masked_mean_rows", left: xv.shape(), right: (mask.len(), 1) });
        }
        let count = mask.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::FullyMasked { row: 0 });
        }
        let mut out = Matrix::zeros(1, xv.cols());
        for (r, _) in mask.iter().enumerate().filter(|(_, &k)| k) {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let out = out.map(|v| v / count as f64);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedMeanRows(x, mask.to_vec()), ng))
    }

    /// `−ln(max(x[0][class], 1e-12))` for a `1 × k` probability row.
    pub fn neg_log_pick(&mut self, x: Var, class: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 || class >= xv.cols() {
            return Err(Error::InvalidArgument(format!("class {class} out of range for a {}x{} probability row", xv.rows(), xv.cols())));
        }
        let p = xv.get(0, class);
        let clamped = p < PROB_FLOOR;
        let loss = if p.is_nan() { p } else { -p.max(PROB_FLOOR).ln() };
        let ng = self.ng(x);
        Ok(self.push(Matrix::filled(1, 1, loss), Op::NegLogPick { x, class, clamped }, ng))
    }

    /// Reverse sweep from the `1 × 1` node `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = self.value(output);
        grads[output.0] = Some(Matrix::filled(seed.rows(), seed.cols(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, up: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, g: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g).expect("gradient shape matches its node"),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // out = a·b: da = up·bᵀ, db = aᵀ·up
                if self.ng(*a) {
                    acc(*a, matmul_nt(up, val(*b)).unwrap());
                }
                if self.ng(*b) {
                    acc(*b, matmul_tn(val(*a), up).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a·bᵀ: da = up·b, db = upᵀ·a
                if self.ng(*a) {
                    acc(*a, matmul(up, val(*b)).unwrap());
                }
                if self.ng(*b) {
                    acc(*b, matmul_tn(up, val(*a)).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, up.clone());
                acc(*b, up.clone());
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, up.hadamard(val(*b)).unwrap());
                }
                if self.ng(*b) {
                    acc(*b, up.hadamard(val(*a)).unwrap());
                }
            }
            Op::AddRow(x, bias) => {
                acc(*x, up.clone());
                if self.ng(*bias) {
                    let mut g = Matrix::zeros(1, up.cols());
                    for r in 0..up.rows() {
                        for (o, v) in g.data_mut().iter_mut().zip(up.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*bias, g);
                }
            }
            Op::Scale(x, f) => acc(*x, up.scale(*f)),
            Op::DivScalar(x, d) => acc(*x, up.map(|v| v / d)),
            Op::Relu(x) => {
                let mut g = up.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(val(*x).data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                acc(*x, g);
            }
            Op::Sigmoid(x) => {
                let mut g = up.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= y * (1.0 - y);
                }
                acc(*x, g);
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                // dx = y ⊙ (dy − Σ y·dy); masked columns have y = 0.
                let y = &node.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let ur = up.row(r);
                    let s = numkernel::dot(yr, ur);
                    for (c, gv) in g.row_mut(r).iter_mut().enumerate() {
                        *gv = yr[c] * (ur[c] - s);
                    }
                }
                acc(*x, g);
            }
            Op::Gather(src, index) => {
                let (r, c) = val(*src).shape();
                let mut g = Matrix::zeros(r, c);
                for (k, &flat) in index.iter().enumerate() {
                    g.data_mut()[flat] += up.data()[k];
                }
                acc(*src, g);
            }
            Op::GatherRows(table, ids) => {
                let (r, c) = val(*table).shape();
                let mut g = Matrix::zeros(r, c);
                for (k, &id) in ids.iter().enumerate() {
                    for (o, v) in g.row_mut(id).iter_mut().zip(up.row(k)) {
                        *o += v;
                    }
                }
                acc(*table, g);
            }
            Op::SliceCols(x, start) => {
                let (r, c) = val(*x).shape();
                let mut g = Matrix::zeros(r, c);
                for row in 0..r {
                    g.row_mut(row)[*start..*start + up.cols()].copy_from_slice(up.row(row));
                }
                acc(*x, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.ng(p) {
                        acc(p, up.slice_cols(offset, w).unwrap());
                    }
                    offset += w;
                }
            }
            Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                let (n, d) = normalized.shape();
                let g = val(*gain);
                if self.ng(*gain) {
                    let mut dg = Matrix::zeros(1, d);
                    for r in 0..n {
                        for c in 0..d {
                            dg.data_mut()[c] += up.get(r, c) * normalized.get(r, c);
                        }
                    }
                    acc(*gain, dg);
                }
                if self.ng(*bias) {
                    let mut db = Matrix::zeros(1, d);
                    for r in 0..n {
                        for (o, v) in db.data_mut().iter_mut().zip(up.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*bias, db);
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(n, d);
                    for (r, &is) in inv_std.iter().enumerate() {
                        let dh: Vec<f64> = (0..d).map(|c| up.get(r, c) * g.data()[c]).collect();
                        let h = normalized.row(r);
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = numkernel::dot(&dh, h) / d as f64;
                        for c in 0..d {
                            dx.set(r, c, is * (dh[c] - mean_dh - h[c] * mean_dh_h));
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::MaskedMeanRows(x, mask) => {
                let (r, c) = val(*x).shape();
                let count = mask.iter().filter(|&&k| k).count() as f64;
                let mut g = Matrix::zeros(r, c);
                for (row, _) in mask.iter().enumerate().filter(|(_, &k)| k) {
                    for (o, v) in g.row_mut(row).iter_mut().zip(up.row(0)) {
                        *o = v / count;
                    }
                }
                acc(*x, g);
            }
            Op::NegLogPick { x, class, clamped } => {
                let (r, c) = val(*x).shape();
                let mut g = Matrix::zeros(r, c);
                if !clamped {
                    g.set(0, *class, -up.get(0, 0) / val(*x).get(0, *class));
                }
                acc(*x, g);
            }
        }
    }
}
