//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Operations are appended in evaluation order, so the node vector is already
//! topologically sorted and the backward pass is a single reverse sweep.

use std::rc::Rc;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    LeakyRelu(Var, f64),
    Elu(Var, f64),
    ClampMin(Var, f64),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records a computation for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    /// Trainable input. Its gradient is retained (and accumulated) by
    /// [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, present after a backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rank2(&self, v: Var) -> Result<(usize, usize), TensorError> {
        self.v(v).rank2()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.v(a), self.v(b));
        if !x.same_shape(y) {
            return Err(mismatch("add", x, y));
        }
        let out = x.zip_map(y, |p, q| p + q);
        Ok(self.record(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.v(a), self.v(b));
        if !x.same_shape(y) {
            return Err(mismatch("sub", x, y));
        }
        let out = x.zip_map(y, |p, q| p - q);
        Ok(self.record(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.v(a), self.v(b));
        if !x.same_shape(y) {
            return Err(mismatch("mul", x, y));
        }
        let out = x.zip_map(y, |p, q| p * q);
        Ok(self.record(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.v(a).map(|x| x * factor);
        self.record(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let out = self.v(a).map(|x| x + offset);
        self.record(out, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (_, k) = self.rank2(a)?;
        let (k2, _) = self.rank2(b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.v(a), self.v(b)));
        }
        let out = matmul(self.v(a), self.v(b));
        Ok(self.record(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`; `b` is stored `out x in` like a dense layer weight.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (_, k) = self.rank2(a)?;
        let (_, k2) = self.rank2(b)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.v(a), self.v(b)));
        }
        let out = matmul_nt(self.v(a), self.v(b));
        Ok(self.record(out, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Adds the `1 x c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a)?;
        let (br, bc) = self.rank2(b)?;
        if br != 1 || bc != c {
            return Err(mismatch("add_row", self.v(a), self.v(b)));
        }
        let bias = self.v(b).data().to_vec();
        let mut out = self.v(a).clone();
        for i in 0..r {
            for (o, bv) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.record(out, Op::AddRow(a, b), &[a, b]))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a)?;
        let (cr, cc) = self.rank2(col)?;
        if cr != r || cc != 1 {
            return Err(mismatch("mul_col", self.v(a), self.v(col)));
        }
        let weights = self.v(col).data().to_vec();
        let mut out = self.v(a).clone();
        for (i, w) in weights.iter().enumerate() {
            for o in &mut out.data_mut()[i * c..(i + 1) * c] {
                *o *= w;
            }
        }
        Ok(self.record(out, Op::MulCol(a, col), &[a, col]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (r, _) = self.rank2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.rank2(p)?;
            if pr != r {
                return Err(mismatch("concat_cols", self.v(first), self.v(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.v(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        Ok(self.record(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let (_, c) = self.rank2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.rank2(p)?;
            if pc != c {
                return Err(mismatch("concat_rows", self.v(first), self.v(p)));
            }
            rows += pr;
            data.extend_from_slice(self.v(p).data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.record(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.v(a).map(f64::exp);
        self.record(out, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.v(a).map(f64::ln);
        self.record(out, Op::Ln(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.v(a).map(|x| x * x);
        self.record(out, Op::Square(a), &[a])
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.v(a).sum());
        self.record(out, Op::Sum(a), &[a])
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.v(a);
        if t.is_empty() {
            return Err(TensorError::Empty("mean"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.record(out, Op::Mean(a), &[a]))
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, _) = self.rank2(a)?;
        let t = self.v(a);
        let sums: Vec<f64> = (0..r).map(|i| t.row_slice(i).iter().sum()).collect();
        let out = Tensor::column(&sums);
        Ok(self.record(out, Op::SumCols(a), &[a]))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a)?;
        let mut out = self.v(a).clone();
        for i in 0..r {
            softmax_in_place(&mut out.data_mut()[i * c..(i + 1) * c]);
        }
        Ok(self.record(out, Op::SoftmaxRows(a), &[a]))
    }

    /// Softmax of an `e x 1` column within groups of rows sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, segments: Rc<[usize]>) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a)?;
        if c != 1 || segments.len() != r {
            return Err(TensorError::Segments {
                rows: r,
                cols: c,
                segments: segments.len(),
            });
        }
        let x = self.v(a).data();
        let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; nseg];
        for (&s, &v) in segments.iter().zip(x) {
            max[s] = max[s].max(v);
        }
        let mut e: Vec<f64> = segments.iter().zip(x).map(|(&s, &v)| (v - max[s]).exp()).collect();
        let mut denom = vec![0.0; nseg];
        for (&s, &v) in segments.iter().zip(&e) {
            denom[s] += v;
        }
        for (v, &s) in e.iter_mut().zip(segments.iter()) {
            *v /= denom[s];
        }
        let out = Tensor::column(&e);
        Ok(self.record(out, Op::SegmentSoftmax(a, segments), &[a]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.v(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.record(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let out = self.v(a).map(|x| if x > 0.0 { x } else { alpha * x.exp_m1() });
        self.record(out, Op::Elu(a, alpha), &[a])
    }

    /// `max(a, floor)`; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let out = self.v(a).map(|x| x.max(floor));
        self.record(out, Op::ClampMin(a, floor), &[a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a)?;
        if start > end || end > c {
            return Err(TensorError::Slice { start, end, cols: c });
        }
        let t = self.v(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..end]);
        }
        let out = Tensor::matrix(r, end - start, data)?;
        Ok(self.record(out, Op::SliceCols(a, start, end), &[a]))
    }

    /// Row `k` of the output is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<[usize]>) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(TensorError::Index { index: bad, len: r });
        }
        let t = self.v(a);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(index.len(), c, data)?;
        Ok(self.record(out, Op::GatherRows(a, index), &[a]))
    }

    /// Row `k` of `a` is added into output row `index[k]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: Rc<[usize]>, rows: usize) -> Result<Var, TensorError> {
        let (r, c) = self.rank2(a)?;
        if index.len() != r {
            return Err(TensorError::Segments {
                rows: r,
                cols: c,
                segments: index.len(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index { index: bad, len: rows });
        }
        let t = self.v(a);
        let mut out = Tensor::zeros(rows, c);
        for (k, &i) in index.iter().enumerate() {
            let src = t.row_slice(k).to_vec();
            for (o, s) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                *o += s;
            }
        }
        Ok(self.record(out, Op::ScatterAddRows(a, index), &[a]))
    }

    /// Accumulates `d root / d leaf` into every trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let rv = &self.nodes[root.0];
        if !rv.value.is_scalar() {
            return Err(TensorError::NonScalarRoot(rv.value.shape().to_vec()));
        }
        if matches!(rv.op, Op::Leaf) {
            return Err(TensorError::Detached);
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::full(1, 1, 1.0).reshape_like(&rv.value));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let contribution = grads
                .get_mut(idx)
                .and_then(Option::take)
                .unwrap_or_else(|| node.value.map(|_| 0.0));
            match &mut node.grad {
                Some(acc) => acc.add_assign(&contribution),
                None => node.grad = Some(contribution),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[idx].value;
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                // C = A B: dA = G B^T, dB = A^T G
                send(*a, matmul_nt(g, val(*b)));
                send(*b, matmul_tn(val(*a), g));
            }
            Op::MatMulNt(a, b) => {
                // C = A B^T: dA = G B, dB = G^T A
                send(*a, matmul(g, val(*b)));
                send(*b, matmul_tn(g, val(*a)));
            }
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                let c = g.cols();
                let mut db = Tensor::zeros(1, c);
                for i in 0..g.rows() {
                    for (d, x) in db.data_mut().iter_mut().zip(g.row_slice(i)) {
                        *d += x;
                    }
                }
                send(*b, db);
            }
            Op::MulCol(a, col) => {
                let w = val(*col);
                let x = val(*a);
                let c = g.cols();
                let mut da = g.clone();
                let mut dw = Tensor::zeros(g.rows(), 1);
                for i in 0..g.rows() {
                    let wi = w.data()[i];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let xr = x.row_slice(i);
                    dw.data_mut()[i] = gr.iter().zip(xr).map(|(p, q)| p * q).sum();
                    for d in &mut da.data_mut()[i * c..(i + 1) * c] {
                        *d *= wi;
                    }
                }
                send(*a, da);
                send(*col, dw);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    let mut d = Vec::with_capacity(g.rows() * pc);
                    for i in 0..g.rows() {
                        d.extend_from_slice(&g.row_slice(i)[offset..offset + pc]);
                    }
                    offset += pc;
                    send(p, Tensor::matrix(g.rows(), pc, d).expect("concat grad shape"));
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut row = 0;
                for &p in parts {
                    let pr = val(p).rows();
                    let d = g.data()[row * c..(row + pr) * c].to_vec();
                    row += pr;
                    send(p, Tensor::matrix(pr, c, d).expect("concat grad shape"));
                }
            }
            Op::Exp(a) => send(*a, g.zip_map(out, |x, y| x * y)),
            Op::Ln(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Square(a) => send(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Sum(a) => {
                let s = g.item();
                send(*a, val(*a).map(|_| s));
            }
            Op::Mean(a) => {
                let s = g.item() / val(*a).len() as f64;
                send(*a, val(*a).map(|_| s));
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = x.clone();
                for i in 0..x.rows() {
                    let gi = g.data()[i];
                    for v in &mut d.data_mut()[i * c..(i + 1) * c] {
                        *v = gi;
                    }
                }
                send(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut d = out.clone();
                for i in 0..out.rows() {
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (k, v) in d.data_mut()[i * c..(i + 1) * c].iter_mut().enumerate() {
                        *v = y[k] * (gr[k] - dot);
                    }
                }
                send(*a, d);
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = out.data();
                let nseg = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; nseg];
                for ((&s, &yv), &gv) in segments.iter().zip(y).zip(g.data()) {
                    dot[s] += yv * gv;
                }
                let d: Vec<f64> = segments
                    .iter()
                    .zip(y)
                    .zip(g.data())
                    .map(|((&s, &yv), &gv)| yv * (gv - dot[s]))
                    .collect();
                send(*a, Tensor::column(&d));
            }
            Op::LeakyRelu(a, slope) => {
                send(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * slope }));
            }
            Op::Elu(a, alpha) => {
                send(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * alpha * x.exp() }));
            }
            Op::ClampMin(a, floor) => {
                send(*a, g.zip_map(val(*a), |gv, x| if x >= *floor { gv } else { 0.0 }));
            }
            Op::SliceCols(a, start, end) => {
                let x = val(*a);
                let c = x.cols();
                let w = end - start;
                let mut d = Tensor::zeros(x.rows(), c);
                for i in 0..x.rows() {
                    d.data_mut()[i * c + start..i * c + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                send(*a, d);
            }
            Op::GatherRows(a, index) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = Tensor::zeros(x.rows(), c);
                for (k, &i) in index.iter().enumerate() {
                    for (dv, gv) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(k)) {
                        *dv += gv;
                    }
                }
                send(*a, d);
            }
            Op::ScatterAddRows(a, index) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(index.len() * c);
                for &i in index.iter() {
                    data.extend_from_slice(g.row_slice(i));
                }
                send(*a, Tensor::matrix(index.len(), c, data).expect("scatter grad shape"));
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

impl Tensor {
    fn reshape_like(self, other: &Tensor) -> Tensor {
        Tensor::new(other.shape().to_vec(), self.into_data()).expect("scalar reshape")
    }
}
