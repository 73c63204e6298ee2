//! Minimal reverse-mode autodiff over [`Tensor`] values.
//!
//! A `Tape` records a computation as a flat list of nodes; parents always
//! precede children, so the backward pass is a single reverse sweep in
//! construction order. Gradients are reported for leaf nodes only; network
//! parameters and batch inputs enter the graph as leaves.
//!
//! Non-smooth ops (`clamp*`, `min_pair`) use the usual subgradient
//! conventions: clamps pass gradient on the closed interval, ties in
//! `min_pair` resolve to the first argument.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// A[m,k] @ B[k,n]
    MatMul(Var, Var),
    /// A[m,k] @ B[n,k]^T
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// a[m,n] + row[1,n] broadcast over rows
    AddRow(Var, Var),
    /// a[m,n] - row[1,n]
    SubRow(Var, Var),
    /// a ⊙ s with s a 1x1 scalar node
    MulScalar(Var, Var),
    /// k*a + b elementwise; only the scale matters for the backward pass
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Cos(Var),
    ClampMin(Var, f64),
    Clamp(Var, f64, f64),
    MinPair(Var, Var),
    SoftmaxRows(Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    Row(Var, usize),
    SliceCols(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Dot(Var, Var),
    /// cosine similarity with zero-guard below [`COSINE_EPS`]
    CosineSim(Var, Var),
}

/// Norms below this are treated as degenerate in [`Tape::cosine_sim`]: the
/// similarity is 0 and no gradient flows.
pub const COSINE_EPS: f64 = 1e-8;

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros if the root did not depend on it.
    pub fn of(&self, v: Var, rows: usize, cols: usize) -> Tensor {
        match self.get(v) {
            Some(g) => {
                assert_eq!(g.rows(), rows);
                assert_eq!(g.cols(), cols);
                g.clone()
            }
            None => Tensor::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_scalar()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn leaf_row(&mut self, row: &[f64]) -> Var {
        self.leaf(Tensor::row_vec(row.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = (self.value(a).rows(), self.value(a).cols());
        let (bk, bn) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(ak, bk, "matmul inner dims");
        let mut out = Tensor::zeros(am, bn);
        for i in 0..am {
            for k in 0..ak {
                let av = self.value(a).at(i, k);
                if av == 0.0 {
                    continue;
                }
                for j in 0..bn {
                    let cur = out.at(i, j);
                    out.set(i, j, cur + av * self.value(b).at(k, j));
                }
            }
        }
        self.push(out, Op::MatMul(a, b))
    }

    /// a[m,k] @ b[n,k]^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = (self.value(a).rows(), self.value(a).cols());
        let (bn, bk) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(ak, bk, "matmul_nt inner dims");
        let mut out = Tensor::zeros(am, bn);
        for i in 0..am {
            for j in 0..bn {
                let mut acc = 0.0;
                for k in 0..ak {
                    acc += self.value(a).at(i, k) * self.value(b).at(j, k);
                }
                out.set(i, j, acc);
            }
        }
        self.push(out, Op::MatMulNT(a, b))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.value(a).rows(), self.value(b).rows(), "zip rows");
        assert_eq!(self.value(a).cols(), self.value(b).cols(), "zip cols");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_vec(self.value(a).rows(), self.value(a).cols(), data);
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn rowwise(&mut self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(row).rows(), 1, "row operand must be 1 x n");
        assert_eq!(self.value(row).cols(), n, "row width");
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                out.set(i, j, f(self.value(a).at(i, j), self.value(row).at(0, j)));
            }
        }
        self.push(out, op)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.rowwise(a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        self.rowwise(a, row, |x, y| x - y, Op::SubRow(a, row))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "mul_scalar needs 1x1 scalar");
        let sv = self.value(s).as_scalar();
        let data = self.value(a).data().iter().map(|&x| x * sv).collect();
        let t = Tensor::from_vec(self.value(a).rows(), self.value(a).cols(), data);
        self.push(t, Op::MulScalar(a, s))
    }

    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Var {
        let data = self.value(a).data().iter().map(|&x| k * x + b).collect();
        let t = Tensor::from_vec(self.value(a).rows(), self.value(a).cols(), data);
        self.push(t, Op::Affine(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_vec(self.value(a).rows(), self.value(a).cols(), data);
        self.push(t, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.map(a, f64::cos, Op::Cos(a))
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.map(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties take the first argument's gradient.
    pub fn min_pair(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, f64::min, Op::MinPair(a, b))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let row = self.value(a).row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out.set(i, j, e);
                denom += e;
            }
            for j in 0..n {
                let v = out.at(i, j) / denom;
                out.set(i, j, v);
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).rows(), self.value(b).rows(), "concat rows");
        let (m, na, nb) = (
            self.value(a).rows(),
            self.value(a).cols(),
            self.value(b).cols(),
        );
        let mut out = Tensor::zeros(m, na + nb);
        for i in 0..m {
            for j in 0..na {
                out.set(i, j, self.value(a).at(i, j));
            }
            for j in 0..nb {
                out.set(i, na + j, self.value(b).at(i, j));
            }
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Stack 1 x n rows into a k x n matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "stack_rows needs at least one row");
        let n = self.value(parts[0]).cols();
        let mut data = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            assert_eq!(self.value(p).rows(), 1, "stack_rows parts must be 1 x n");
            assert_eq!(self.value(p).cols(), n, "stack_rows widths");
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::from_vec(parts.len(), n, data);
        self.push(t, Op::StackRows(parts.to_vec()))
    }

    pub fn row(&mut self, a: Var, idx: usize) -> Var {
        let t = Tensor::row_vec(self.value(a).row_slice(idx).to_vec());
        self.push(t, Op::Row(a, idx))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Tensor::zeros(m, len);
        for i in 0..m {
            for j in 0..len {
                out.set(i, j, self.value(a).at(i, start + j));
            }
        }
        self.push(out, Op::SliceCols(a, start, len))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let n = self.value(a).len() as f64;
        self.push(Tensor::scalar(s / n), Op::Mean(a))
    }

    /// Column means: B x K -> 1 x K.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let mut out = Tensor::zeros(1, n);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..m {
                acc += self.value(a).at(i, j);
            }
            out.set(0, j, acc / m as f64);
        }
        self.push(out, Op::MeanRows(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "dot lengths");
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b))
    }

    /// Cosine similarity of two same-length vectors, 0 when either norm is
    /// below [`COSINE_EPS`] (no gradient flows in that case).
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "cosine lengths");
        let (na, nb, dot) = cosine_parts(self.value(a).data(), self.value(b).data());
        let v = if na < COSINE_EPS || nb < COSINE_EPS {
            0.0
        } else {
            dot / (na * nb)
        };
        self.push(Tensor::scalar(v), Op::CosineSim(a, b))
    }

    /// Reverse sweep from a scalar root. Returns leaf gradients.
    pub fn backward(&mut self, root: Var) -> Grads {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        Grads { by_node: grads }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G @ B^T
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    for k in 0..av.cols() {
                        let mut acc = 0.0;
                        for j in 0..bv.cols() {
                            acc += g.at(i, j) * bv.at(k, j);
                        }
                        da.set(i, k, acc);
                    }
                }
                // dB = A^T @ G
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                for k in 0..bv.rows() {
                    for j in 0..bv.cols() {
                        let mut acc = 0.0;
                        for i in 0..av.rows() {
                            acc += av.at(i, k) * g.at(i, j);
                        }
                        db.set(k, j, acc);
                    }
                }
                accum(&mut grads[a.0], &da);
                accum(&mut grads[b.0], &db);
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // C = A @ B^T: dA = G @ B, dB = G^T @ A
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    for k in 0..av.cols() {
                        let mut acc = 0.0;
                        for j in 0..bv.rows() {
                            acc += g.at(i, j) * bv.at(j, k);
                        }
                        da.set(i, k, acc);
                    }
                }
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                for j in 0..bv.rows() {
                    for k in 0..bv.cols() {
                        let mut acc = 0.0;
                        for i in 0..av.rows() {
                            acc += g.at(i, j) * av.at(i, k);
                        }
                        db.set(j, k, acc);
                    }
                }
                accum(&mut grads[a.0], &da);
                accum(&mut grads[b.0], &db);
            }
            Op::Add(a, b) => {
                accum(&mut grads[a.0], g);
                accum(&mut grads[b.0], g);
            }
            Op::Sub(a, b) => {
                accum(&mut grads[a.0], g);
                accum_scaled(&mut grads[b.0], g, -1.0);
            }
            Op::Mul(a, b) => {
                let da = ew(g, self.value(*b), |gv, bv| gv * bv);
                let db = ew(g, self.value(*a), |gv, av| gv * av);
                accum(&mut grads[a.0], &da);
                accum(&mut grads[b.0], &db);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                let da = ew(g, bv, |gv, b| gv / b);
                let av = self.value(*a);
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                for i in 0..db.len() {
                    let b = bv.data()[i];
                    db.data_mut()[i] = -g.data()[i] * av.data()[i] / (b * b);
                }
                accum(&mut grads[a.0], &da);
                accum(&mut grads[b.0], &db);
            }
            Op::AddRow(a, row) | Op::SubRow(a, row) => {
                let sign = if matches!(node.op, Op::AddRow(..)) {
                    1.0
                } else {
                    -1.0
                };
                accum(&mut grads[a.0], g);
                let mut dr = Tensor::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        let cur = dr.at(0, j);
                        dr.set(0, j, cur + sign * g.at(i, j));
                    }
                }
                accum(&mut grads[row.0], &dr);
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).as_scalar();
                let da = gscale(g, sv);
                let av = self.value(*a);
                let ds: f64 = g.data().iter().zip(av.data()).map(|(&gv, &x)| gv * x).sum();
                accum(&mut grads[a.0], &da);
                accum(&mut grads[s.0], &Tensor::scalar(ds));
            }
            Op::Affine(a, k) => {
                accum_scaled(&mut grads[a.0], g, *k);
            }
            Op::Tanh(a) => {
                let da = ew(g, y, |gv, yv| gv * (1.0 - yv * yv));
                accum(&mut grads[a.0], &da);
            }
            Op::Sigmoid(a) => {
                let da = ew(g, y, |gv, yv| gv * yv * (1.0 - yv));
                accum(&mut grads[a.0], &da);
            }
            Op::Exp(a) => {
                let da = ew(g, y, |gv, yv| gv * yv);
                accum(&mut grads[a.0], &da);
            }
            Op::Log(a) => {
                let da = ew(g, self.value(*a), |gv, x| gv / x);
                accum(&mut grads[a.0], &da);
            }
            Op::Sqrt(a) => {
                let da = ew(g, y, |gv, yv| gv * 0.5 / yv);
                accum(&mut grads[a.0], &da);
            }
            Op::Square(a) => {
                let da = ew(g, self.value(*a), |gv, x| gv * 2.0 * x);
                accum(&mut grads[a.0], &da);
            }
            Op::Cos(a) => {
                let da = ew(g, self.value(*a), |gv, x| -gv * x.sin());
                accum(&mut grads[a.0], &da);
            }
            Op::ClampMin(a, floor) => {
                let da = ew(
                    g,
                    self.value(*a),
                    |gv, x| if x >= *floor { gv } else { 0.0 },
                );
                accum(&mut grads[a.0], &da);
            }
            Op::Clamp(a, lo, hi) => {
                let da = ew(g, self.value(*a), |gv, x| {
                    if x >= *lo && x <= *hi {
                        gv
                    } else {
                        0.0
                    }
                });
                accum(&mut grads[a.0], &da);
            }
            Op::MinPair(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let mut db = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.len() {
                    if av.data()[i] <= bv.data()[i] {
                        da.data_mut()[i] = g.data()[i];
                    } else {
                        db.data_mut()[i] = g.data()[i];
                    }
                }
                accum(&mut grads[a.0], &da);
                accum(&mut grads[b.0], &db);
            }
            Op::SoftmaxRows(a) => {
                let mut da = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let mut dotv = 0.0;
                    for j in 0..y.cols() {
                        dotv += g.at(i, j) * y.at(i, j);
                    }
                    for j in 0..y.cols() {
                        da.set(i, j, (g.at(i, j) - dotv) * y.at(i, j));
                    }
                }
                accum(&mut grads[a.0], &da);
            }
            Op::ConcatCols(a, b) => {
                let (na, nb) = (self.value(*a).cols(), self.value(*b).cols());
                let m = g.rows();
                let mut da = Tensor::zeros(m, na);
                let mut db = Tensor::zeros(m, nb);
                for i in 0..m {
                    for j in 0..na {
                        da.set(i, j, g.at(i, j));
                    }
                    for j in 0..nb {
                        db.set(i, j, g.at(i, na + j));
                    }
                }
                accum(&mut grads[a.0], &da);
                accum(&mut grads[b.0], &db);
            }
            Op::StackRows(parts) => {
                for (r, p) in parts.iter().enumerate() {
                    let dr = Tensor::row_vec(g.row_slice(r).to_vec());
                    accum(&mut grads[p.0], &dr);
                }
            }
            Op::Row(a, idx) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for j in 0..av.cols() {
                    da.set(*idx, j, g.at(0, j));
                }
                accum(&mut grads[a.0], &da);
            }
            Op::SliceCols(a, start, len) => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    for j in 0..*len {
                        da.set(i, start + j, g.at(i, j));
                    }
                }
                accum(&mut grads[a.0], &da);
            }
            Op::Sum(a) => {
                let gv = g.as_scalar();
                let av = self.value(*a);
                let da = Tensor::from_vec(av.rows(), av.cols(), vec![gv; av.len()]);
                accum(&mut grads[a.0], &da);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = g.as_scalar() / av.len() as f64;
                let da = Tensor::from_vec(av.rows(), av.cols(), vec![gv; av.len()]);
                accum(&mut grads[a.0], &da);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let m = av.rows() as f64;
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    for j in 0..av.cols() {
                        da.set(i, j, g.at(0, j) / m);
                    }
                }
                accum(&mut grads[a.0], &da);
            }
            Op::Dot(a, b) => {
                let gv = g.as_scalar();
                let da = gscale_shaped(self.value(*b), self.value(*a), gv);
                let db = gscale_shaped(self.value(*a), self.value(*b), gv);
                accum(&mut grads[a.0], &da);
                accum(&mut grads[b.0], &db);
            }
            Op::CosineSim(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (na, nb, dotv) = cosine_parts(av.data(), bv.data());
                if na < COSINE_EPS || nb < COSINE_EPS {
                    return;
                }
                let gv = g.as_scalar();
                let kappa = dotv / (na * nb);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                for i in 0..av.len() {
                    da.data_mut()[i] =
                        gv * (bv.data()[i] / (na * nb) - kappa * av.data()[i] / (na * na));
                    db.data_mut()[i] =
                        gv * (av.data()[i] / (na * nb) - kappa * bv.data()[i] / (nb * nb));
                }
                accum(&mut grads[a.0], &da);
                accum(&mut grads[b.0], &db);
            }
        }
    }
}

fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<f64>();
    (na, nb, dot)
}

fn ew(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&gv, &ov)| f(gv, ov))
        .collect();
    Tensor::from_vec(g.rows(), g.cols(), data)
}

fn gscale(g: &Tensor, k: f64) -> Tensor {
    let data = g.data().iter().map(|&x| x * k).collect();
    Tensor::from_vec(g.rows(), g.cols(), data)
}

/// src scaled by k, reshaped to match `shape_of`.
fn gscale_shaped(src: &Tensor, shape_of: &Tensor, k: f64) -> Tensor {
    let data = src.data().iter().map(|&x| x * k).collect();
    Tensor::from_vec(shape_of.rows(), shape_of.cols(), data)
}

fn accum(slot: &mut Option<Tensor>, delta: &Tensor) {
    match slot {
        Some(t) => {
            for (d, s) in t.data_mut().iter_mut().zip(delta.data()) {
                *d += s;
            }
        }
        None => *slot = Some(delta.clone()),
    }
}

fn accum_scaled(slot: &mut Option<Tensor>, delta: &Tensor, k: f64) {
    let scaled = gscale(delta, k);
    accum(slot, &scaled);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};

    /// Central finite differences of `f` with respect to the entries of one
    /// leaf input, holding the rest fixed.
    fn fd_grad(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut hi = x.to_vec();
            hi[i] += eps;
            let mut lo = x.to_vec();
            lo[i] -= eps;
            g[i] = (f(&hi) - f(&lo)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let scale = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / scale < tol,
                "grad[{i}]: analytic {a} vs numeric {n}"
            );
        }
    }

    /// A deliberately tangled scalar function exercising most ops.
    fn tangled(x: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(2, 3, x[0..6].to_vec()));
        let b = tape.leaf(Tensor::from_vec(3, 2, x[6..12].to_vec()));
        let c = tape.matmul(a, b); // 2x2
        let d = tape.tanh(c);
        let e = tape.softmax_rows(d);
        let f = tape.square(e);
        let g = tape.row(f, 1);
        let h = tape.leaf(Tensor::row_vec(x[12..14].to_vec()));
        let i = tape.mul(g, h);
        let j = tape.sum(i);
        let k = tape.exp(j);
        let l = tape.log(k);
        tape.scalar(l)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = seeded(11);
        let x: Vec<f64> = (0..14).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(2, 3, x[0..6].to_vec()));
        let b = tape.leaf(Tensor::from_vec(3, 2, x[6..12].to_vec()));
        let c = tape.matmul(a, b);
        let d = tape.tanh(c);
        let e = tape.softmax_rows(d);
        let f = tape.square(e);
        let g = tape.row(f, 1);
        let h = tape.leaf(Tensor::row_vec(x[12..14].to_vec()));
        let i = tape.mul(g, h);
        let j = tape.sum(i);
        let k = tape.exp(j);
        let l = tape.log(k);
        let grads = tape.backward(l);

        let mut analytic = Vec::new();
        analytic.extend_from_slice(grads.of(a, 2, 3).data());
        analytic.extend_from_slice(grads.of(b, 3, 2).data());
        analytic.extend_from_slice(grads.of(h, 1, 2).data());

        let numeric = fd_grad(&x, 1e-5, tangled);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn matmul_nt_agrees_with_explicit_transpose() {
        let mut rng = seeded(5);
        let a_data: Vec<f64> = (0..6).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let b_data: Vec<f64> = (0..6).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(2, 3, a_data.clone()));
        let b = tape.leaf(Tensor::from_vec(2, 3, b_data.clone()));
        let c = tape.matmul_nt(a, b);
        // by hand: c[i][j] = sum_k a[i][k] b[j][k]
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a_data[i * 3 + k] * b_data[j * 3 + k];
                }
                assert!((tape.value(c).at(i, j) - acc).abs() < 1e-15);
            }
        }

        let s = tape.sum(c);
        let grads = tape.backward(s);

        let f = |x: &[f64]| {
            let mut acc = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..3 {
                        acc += x[i * 3 + k] * b_data[j * 3 + k];
                    }
                }
            }
            acc
        };
        let numeric = fd_grad(&a_data, 1e-6, f);
        assert_close(grads.of(a, 2, 3).data(), &numeric, 1e-6);
    }

    #[test]
    fn moments_pipeline_matches_finite_differences() {
        // mean_rows -> sub_row -> square -> mean_rows -> clamp_min -> sqrt -> log -> sum
        let mut rng = seeded(9);
        let x: Vec<f64> = (0..12).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::from_vec(4, 3, x.to_vec()));
            let mu = tape.mean_rows(a);
            let centered = tape.sub_row(a, mu);
            let sq = tape.square(centered);
            let var = tape.mean_rows(sq);
            let varf = tape.clamp_min(var, 1e-12);
            let sigma = tape.sqrt(varf);
            let ls = tape.log(sigma);
            let s = tape.sum(ls);
            tape.scalar(s)
        };

        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(4, 3, x.clone()));
        let mu = tape.mean_rows(a);
        let centered = tape.sub_row(a, mu);
        let sq = tape.square(centered);
        let var = tape.mean_rows(sq);
        let varf = tape.clamp_min(var, 1e-12);
        let sigma = tape.sqrt(varf);
        let ls = tape.log(sigma);
        let s = tape.sum(ls);
        let grads = tape.backward(s);

        let numeric = fd_grad(&x, 1e-5, f);
        assert_close(grads.of(a, 4, 3).data(), &numeric, 1e-5);
    }

    #[test]
    fn cosine_sim_gradients_and_guard() {
        let a_data = vec![0.3, -0.7, 0.2];
        let b_data = vec![1.1, 0.4, -0.5];
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf_row(&x[0..3]);
            let b = tape.leaf_row(&x[3..6]);
            let c = tape.cosine_sim(a, b);
            tape.scalar(c)
        };
        let mut joined = a_data.clone();
        joined.extend_from_slice(&b_data);

        let mut tape = Tape::new();
        let a = tape.leaf_row(&a_data);
        let b = tape.leaf_row(&b_data);
        let c = tape.cosine_sim(a, b);
        let grads = tape.backward(c);
        let mut analytic = grads.of(a, 1, 3).data().to_vec();
        analytic.extend_from_slice(grads.of(b, 1, 3).data());
        let numeric = fd_grad(&joined, 1e-6, f);
        assert_close(&analytic, &numeric, 1e-6);

        // degenerate: zero vector yields zero similarity and zero gradient
        let mut tape = Tape::new();
        let z = tape.leaf_row(&[0.0, 0.0, 0.0]);
        let b = tape.leaf_row(&b_data);
        let c = tape.cosine_sim(z, b);
        assert_eq!(tape.scalar(c), 0.0);
        let grads = tape.backward(c);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn min_pair_and_clamp_subgradients() {
        let mut tape = Tape::new();
        let a = tape.leaf_scalar(2.0);
        let b = tape.leaf_scalar(3.0);
        let m = tape.min_pair(a, b);
        let grads = tape.backward(m);
        assert_eq!(grads.of(a, 1, 1).as_scalar(), 1.0);
        assert_eq!(grads.of(b, 1, 1).as_scalar(), 0.0);

        let mut tape = Tape::new();
        let x = tape.leaf_scalar(1.5);
        let c = tape.clamp(x, 0.8, 1.2);
        assert_eq!(tape.scalar(c), 1.2);
        let grads = tape.backward(c);
        assert_eq!(
            grads.of(x, 1, 1).as_scalar(),
            0.0,
            "clamped-off input gets no gradient"
        );
    }

    #[test]
    fn disconnected_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf_scalar(1.0);
        let b = tape.leaf_scalar(5.0);
        let y = tape.square(a);
        let grads = tape.backward(y);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.of(a, 1, 1).as_scalar(), 2.0);
    }
}
