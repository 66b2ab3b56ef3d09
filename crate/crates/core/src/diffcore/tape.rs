use std::sync::Arc;

use super::activation::{sigmoid, softplus, Activation};
use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTiled(Var, Var),
    MulTiled(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Recip(Var),
    Act(Var, Activation),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Concat(Var, Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, index: Arc<[usize]> },
    SumBlocks { x: Var, block: usize },
    BlockMatMul { a: Var, z: Var },
    PairSqDist { p: Var, group: usize },
    SquaredError(Var, Var),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddTiled(..) => "add_tiled",
            Op::MulTiled(..) => "mul_tiled",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::Recip(..) => "recip",
            Op::Act(_, Activation::Tanh) => "tanh",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Elu) => "elu",
            Op::Softplus(..) => "softplus",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SumBlocks { .. } => "sum_blocks",
            Op::BlockMatMul { .. } => "block_matmul",
            Op::PairSqDist { .. } => "pair_sq_dist",
            Op::SquaredError(..) => "squared_error",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// Every forward op checks its output for NaN/Inf and reports the offending
/// node instead of recording it.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Borrowed gradient buffer; `None` when `v` does not influence the loss.
    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, DiffError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(id))
    }

    /// Records an input. Parameters and constants are both leaves; only the
    /// caller decides which gradients it reads back.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push(value, Op::Leaf)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() || wv.shape().len() != 2 {
            return Err(mismatch("linear", xv, wv));
        }
        if bv.len() != wv.cols() {
            return Err(mismatch("linear", wv, bv));
        }
        let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm(n, k, m, xv.data(), false, wv.data(), false, &mut out, true);
        self.push(Tensor::matrix(n, m, out), Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() || bv.shape().len() != 2 {
            return Err(mismatch("matmul", av, bv));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, av.data(), false, bv.data(), false, &mut out, false);
        self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op.name(), av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn tiled(&mut self, x: Var, y: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, DiffError> {
        let (xv, yv) = (self.value(x), self.value(y));
        let (yr, c) = (yv.rows(), yv.cols());
        if xv.cols() != c || yr == 0 || xv.rows() % yr != 0 {
            return Err(mismatch(op.name(), xv, yv));
        }
        let mut data = Vec::with_capacity(xv.len());
        for (r, row) in xv.data().chunks(c.max(1)).enumerate() {
            let yrow = &yv.data()[(r % yr) * c..(r % yr + 1) * c];
            data.extend(row.iter().zip(yrow).map(|(a, b)| f(*a, *b)));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, op)
    }

    /// `x + y` where `y` has a divisor of `x`'s row count and is repeated
    /// down the rows (a `1 × c` `y` is the usual bias broadcast).
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var, DiffError> {
        self.tiled(x, y, Op::AddTiled(x, y), |a, b| a + b)
    }

    /// Elementwise `x ∘ y` with `y` repeated down the rows as in [`Tape::add_tiled`].
    pub fn mul_tiled(&mut self, x: Var, y: Var) -> Result<Var, DiffError> {
        self.tiled(x, y, Op::MulTiled(x, y), |a, b| a * b)
    }

    /// `s · x` for a one-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, DiffError> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(mismatch("mul_scalar", self.value(x), sv));
        }
        let k = sv.item();
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v * k).collect())?;
        self.push(value, Op::MulScalar(x, s))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())?;
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        self.map(x, Op::AddConst(x), |v| v + c)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, DiffError> {
        self.map(x, Op::Act(x, kind), |v| kind.apply(v))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.activation(x, Activation::Relu)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.activation(x, Activation::Elu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, DiffError> {
        self.map(x, Op::Softplus(x), softplus)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(DiffError::Empty { op: "mean" });
        }
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Concatenation along the last axis of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(mismatch("concat", av, bv));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for r in 0..av.rows() {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let rows = av.rows();
        self.push(Tensor::matrix(rows, ca + cb, data), Op::Concat(a, b))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c {
            return Err(DiffError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for row in xv.data().chunks(c.max(1)) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let rows = xv.rows();
        self.push(Tensor::matrix(rows, len, data), Op::SliceCols { x, start })
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > r {
            return Err(DiffError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::matrix(len, c, data), Op::SliceRows { x, start })
    }

    /// Row `e` of the output is row `index[e]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            if i >= r {
                return Err(DiffError::OutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let n = index.len();
        self.push(Tensor::matrix(n, c, data), Op::GatherRows { x, index })
    }

    /// Sums each run of `block` consecutive rows.
    pub fn sum_blocks(&mut self, x: Var, block: usize) -> Result<Var, DiffError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if block == 0 || r % block != 0 {
            return Err(DiffError::OutOfRange {
                op: "sum_blocks",
                index: block,
                bound: r,
            });
        }
        let mut data = vec![0.0; (r / block) * c];
        for (i, row) in xv.data().chunks(c.max(1)).enumerate() {
            add_into(&mut data[(i / block) * c..(i / block + 1) * c], row);
        }
        self.push(Tensor::matrix(r / block, c, data), Op::SumBlocks { x, block })
    }

    /// Block-diagonal product: `a` stacks `g` square `n × n` blocks (`g·n × n`),
    /// `z` stacks `g` blocks of `n × m`; block `k` of the result is `a_k · z_k`.
    pub fn block_matmul(&mut self, a: Var, z: Var) -> Result<Var, DiffError> {
        let (av, zv) = (self.value(a), self.value(z));
        let n = av.cols();
        if av.rows() != zv.rows() || n == 0 || av.rows() % n != 0 {
            return Err(mismatch("block_matmul", av, zv));
        }
        let m = zv.cols();
        let groups = av.rows() / n;
        let mut out = vec![0.0; av.rows() * m];
        for g in 0..groups {
            let ab = &av.data()[g * n * n..(g + 1) * n * n];
            let zb = &zv.data()[g * n * m..(g + 1) * n * m];
            let ob = &mut out[g * n * m..(g + 1) * n * m];
            for i in 0..n {
                for k in 0..n {
                    let aik = ab[i * n + k];
                    if aik != 0.0 {
                        for j in 0..m {
                            ob[i * m + j] += aik * zb[k * m + j];
                        }
                    }
                }
            }
        }
        let rows = av.rows();
        self.push(Tensor::matrix(rows, m, out), Op::BlockMatMul { a, z })
    }

    /// Squared Euclidean distances between rows within each group of `group`
    /// consecutive rows; output is `rows × group`.
    pub fn pair_sq_dist(&mut self, p: Var, group: usize) -> Result<Var, DiffError> {
        let pv = self.value(p);
        let (r, c) = (pv.rows(), pv.cols());
        if group == 0 || r % group != 0 {
            return Err(DiffError::OutOfRange {
                op: "pair_sq_dist",
                index: group,
                bound: r,
            });
        }
        let mut out = vec![0.0; r * group];
        for g in 0..r / group {
            for i in 0..group {
                let pi = &pv.data()[(g * group + i) * c..(g * group + i + 1) * c];
                for j in 0..group {
                    if i == j {
                        continue;
                    }
                    let pj = &pv.data()[(g * group + j) * c..(g * group + j + 1) * c];
                    out[(g * group + i) * group + j] =
                        pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
                }
            }
        }
        self.push(Tensor::matrix(r, group, out), Op::PairSqDist { p, group })
    }

    /// Scalar `Σ (a − b)²`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(mismatch("squared_error", av, bv));
        }
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s), Op::SquaredError(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape(x))
    }

    /// Reverse pass from a scalar node. Gradients accumulate at fan-out.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode {
                node: loss.0,
                len: self.nodes.len(),
            });
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.propagate(i, g, lo);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        lo[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, i: usize, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.rows(), xv.cols(), wv.cols());
                gemm(n, m, k, g, false, wv.data(), true, self.slot(lo, *x), true);
                gemm(k, n, m, xv.data(), true, g, false, self.slot(lo, *w), true);
                let db = self.slot(lo, *b);
                for row in g.chunks(m.max(1)) {
                    add_into(db, row);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                gemm(n, m, k, g, false, bv.data(), true, self.slot(lo, *a), true);
                gemm(k, n, m, av.data(), true, g, false, self.slot(lo, *b), true);
            }
            Op::Add(a, b) => {
                add_into(self.slot(lo, *a), g);
                add_into(self.slot(lo, *b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.slot(lo, *a), g);
                for (d, s) in self.slot(lo, *b).iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for ((d, s), o) in self.slot(lo, *a).iter_mut().zip(g).zip(bv.data()) {
                    *d += s * o;
                }
                for ((d, s), o) in self.slot(lo, *b).iter_mut().zip(g).zip(av.data()) {
                    *d += s * o;
                }
            }
            Op::AddTiled(x, t) => {
                add_into(self.slot(lo, *x), g);
                let tv = self.value(*t);
                let (tr, c) = (tv.rows(), tv.cols());
                let dt = self.slot(lo, *t);
                for (r, row) in g.chunks(c.max(1)).enumerate() {
                    add_into(&mut dt[(r % tr) * c..(r % tr + 1) * c], row);
                }
            }
            Op::MulTiled(x, t) => {
                let (xv, tv) = (self.value(*x), self.value(*t));
                let (tr, c) = (tv.rows(), tv.cols());
                let dx = self.slot(lo, *x);
                for (r, (drow, grow)) in dx.chunks_mut(c.max(1)).zip(g.chunks(c.max(1))).enumerate() {
                    let trow = &tv.data()[(r % tr) * c..(r % tr + 1) * c];
                    for ((d, s), o) in drow.iter_mut().zip(grow).zip(trow) {
                        *d += s * o;
                    }
                }
                let dt = self.slot(lo, *t);
                for (r, (grow, xrow)) in g.chunks(c.max(1)).zip(xv.data().chunks(c.max(1))).enumerate() {
                    let drow = &mut dt[(r % tr) * c..(r % tr + 1) * c];
                    for ((d, s), o) in drow.iter_mut().zip(grow).zip(xrow) {
                        *d += s * o;
                    }
                }
            }
            Op::MulScalar(x, s) => {
                let (xv, k) = (self.value(*x), self.value(*s).item());
                for (d, gv) in self.slot(lo, *x).iter_mut().zip(g) {
                    *d += gv * k;
                }
                let dot: f64 = g.iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                self.slot(lo, *s)[0] += dot;
            }
            Op::Scale(x, c) => {
                for (d, gv) in self.slot(lo, *x).iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => add_into(self.slot(lo, *x), g),
            Op::Recip(x) => {
                for ((d, gv), yv) in self.slot(lo, *x).iter_mut().zip(g).zip(y.data()) {
                    *d -= gv * yv * yv;
                }
            }
            Op::Act(x, kind) => {
                for ((d, gv), yv) in self.slot(lo, *x).iter_mut().zip(g).zip(y.data()) {
                    *d += gv * kind.derivative_from_output(*yv);
                }
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                for ((d, gv), xi) in self.slot(lo, *x).iter_mut().zip(g).zip(xv.data()) {
                    *d += gv * sigmoid(*xi);
                }
            }
            Op::Sum(x) => {
                for d in self.slot(lo, *x).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(x) => {
                let dx = self.slot(lo, *x);
                let k = g[0] / dx.len() as f64;
                for d in dx.iter_mut() {
                    *d += k;
                }
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let da = self.slot(lo, *a);
                for (r, row) in g.chunks((ca + cb).max(1)).enumerate() {
                    add_into(&mut da[r * ca..(r + 1) * ca], &row[..ca]);
                }
                let db = self.slot(lo, *b);
                for (r, row) in g.chunks((ca + cb).max(1)).enumerate() {
                    add_into(&mut db[r * cb..(r + 1) * cb], &row[ca..]);
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = y.cols();
                let dx = self.slot(lo, *x);
                for (r, row) in g.chunks(len.max(1)).enumerate() {
                    add_into(&mut dx[r * c + start..r * c + start + len], row);
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                let dx = self.slot(lo, *x);
                add_into(&mut dx[start * c..start * c + g.len()], g);
            }
            Op::GatherRows { x, index } => {
                let c = y.cols();
                let dx = self.slot(lo, *x);
                for (e, &src) in index.iter().enumerate() {
                    add_into(&mut dx[src * c..(src + 1) * c], &g[e * c..(e + 1) * c]);
                }
            }
            Op::SumBlocks { x, block } => {
                let c = y.cols();
                let dx = self.slot(lo, *x);
                for (r, row) in dx.chunks_mut(c.max(1)).enumerate() {
                    add_into(row, &g[(r / block) * c..(r / block + 1) * c]);
                }
            }
            Op::BlockMatMul { a, z } => {
                let (av, zv) = (self.value(*a), self.value(*z));
                let n = av.cols();
                let m = zv.cols();
                let groups = av.rows() / n;
                {
                    let da = self.slot(lo, *a);
                    for gi in 0..groups {
                        let zb = &zv.data()[gi * n * m..(gi + 1) * n * m];
                        let gb = &g[gi * n * m..(gi + 1) * n * m];
                        for i in 0..n {
                            for k in 0..n {
                                let s: f64 = (0..m).map(|j| gb[i * m + j] * zb[k * m + j]).sum();
                                da[gi * n * n + i * n + k] += s;
                            }
                        }
                    }
                }
                let dz = self.slot(lo, *z);
                for gi in 0..groups {
                    let ab = &av.data()[gi * n * n..(gi + 1) * n * n];
                    let gb = &g[gi * n * m..(gi + 1) * n * m];
                    for i in 0..n {
                        for k in 0..n {
                            let aik = ab[i * n + k];
                            if aik != 0.0 {
                                for j in 0..m {
                                    dz[gi * n * m + k * m + j] += aik * gb[i * m + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::PairSqDist { p, group } => {
                let pv = self.value(*p);
                let c = pv.cols();
                let n = *group;
                let dp = self.slot(lo, *p);
                for gi in 0..pv.rows() / n {
                    for i in 0..n {
                        let ri = gi * n + i;
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let rj = gi * n + j;
                            let w = 2.0 * (g[ri * n + j] + g[rj * n + i]);
                            for col in 0..c {
                                dp[ri * c + col] += w * (pv.data()[ri * c + col] - pv.data()[rj * c + col]);
                            }
                        }
                    }
                }
            }
            Op::SquaredError(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * g[0];
                for ((d, x), t) in self.slot(lo, *a).iter_mut().zip(av.data()).zip(bv.data()) {
                    *d += k * (x - t);
                }
                for ((d, x), t) in self.slot(lo, *b).iter_mut().zip(av.data()).zip(bv.data()) {
                    *d -= k * (x - t);
                }
            }
        }
    }
}
