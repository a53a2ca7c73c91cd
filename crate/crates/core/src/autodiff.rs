//! A minimal reverse-mode tape over matrix-valued nodes.
//!
//! Every model component builds its forward pass out of the operations on
//! [`Graph`]; calling [`Graph::backward`] on a `1×1` node then yields the
//! gradient of that scalar with respect to every node that depends on a
//! trainable leaf. Nodes derived only from constants are never visited on
//! the way back.
//!
//! The operation set is closed: matrix products, elementwise arithmetic,
//! row softmax / log-softmax, layer normalization, the smooth
//! nonlinearities used by the model, row L2 norms, gathers (which is how
//! top-k selections enter the tape) and reductions.

use crate::tensor::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    RowNorm(Var),
    RowNormalize(Var),
    Gather(Var, Vec<usize>),
    GroupWeightedSum(Var, Var),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output
    /// through a trainable path.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, materialized as zeros when absent.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m[(0, 0)]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let ng = self.needs(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// Adds the `1×c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let v = broadcast_row(self.value(a), self.value(r), |x, y| x + y);
        self.binary(a, r, v, Op::AddRow(a, r))
    }

    /// Multiplies every row of `a` elementwise by the `1×c` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let v = broadcast_row(self.value(a), self.value(r), |x, y| x * y);
        self.binary(a, r, v, Op::MulRow(a, r))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = map_rows(self.value(a), |row, out| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        });
        self.unary(a, v, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = map_rows(self.value(a), |row, out| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x - lse;
            }
        });
        self.unary(a, v, Op::LogSoftmax(a))
    }

    /// Row-wise standardization `(x − mean) / sqrt(var + eps)`, without
    /// gain or bias.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = map_rows(self.value(a), |row, out| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        });
        self.unary(a, v, Op::LayerNorm(a, eps))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.unary(a, v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.unary(a, v, Op::Log(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    /// Euclidean norm of every row, as a column vector.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_vec(
            m.rows(),
            1,
            (0..m.rows()).map(|r| crate::tensor::norm(m.row(r))).collect(),
        );
        self.unary(a, v, Op::RowNorm(a))
    }

    /// Scales every row to unit Euclidean norm. Zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let v = map_rows(self.value(a), |row, out| {
            let n = crate::tensor::norm(row);
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            for (o, &x) in out.iter_mut().zip(row) {
                *o = x * inv;
            }
        });
        self.unary(a, v, Op::RowNormalize(a))
    }

    /// Builds a `rows×cols` matrix whose entries are `a`'s entries at the
    /// given flat (row-major) positions.
    pub fn gather(&mut self, a: Var, flat: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(flat.len(), rows * cols, "gather shape mismatch");
        let src = self.value(a).as_slice();
        let v = Matrix::from_vec(rows, cols, flat.iter().map(|&i| src[i]).collect());
        self.unary(a, v, Op::Gather(a, flat))
    }

    /// Copies whole rows of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let cols = self.value(a).cols();
        let flat = idx
            .iter()
            .flat_map(|&r| (r * cols)..((r + 1) * cols))
            .collect();
        self.gather(a, flat, idx.len(), cols)
    }

    /// For weights `w: n×k` and rows `x: (n·k)×d`, returns the `n×d`
    /// matrix whose row `i` is `Σ_j w[i,j] · x[i·k + j]`.
    pub fn group_weighted_sum(&mut self, w: Var, x: Var) -> Var {
        let (n, k) = self.value(w).shape();
        let xm = self.value(x);
        assert_eq!(xm.rows(), n * k, "group_weighted_sum shape mismatch");
        let d = xm.cols();
        let wm = self.value(w);
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..k {
                let wt = wm[(i, j)];
                for (o, &xv) in out.row_mut(i).iter_mut().zip(xm.row(i * k + j)) {
                    *o += wt * xv;
                }
            }
        }
        self.binary(w, x, out, Op::GroupWeightedSum(w, x))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshape(rows, cols);
        self.unary(a, v, Op::Reshape(a))
    }

    /// Sum of all entries, as `1×1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    /// Mean of all entries, as `1×1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, as a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, &x) in out.row_mut(0).iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / m.rows() as f64;
        out.as_mut_slice().iter_mut().for_each(|o| *o *= inv);
        self.unary(a, out, Op::MeanRows(a))
    }

    /// Reverse sweep from the `1×1` node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.matmul_t(self.value(b)));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, self.value(a).t_matmul(g));
                }
            }
            &Op::MatMulT(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.matmul(self.value(b)));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.t_matmul(self.value(a)));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, r) => {
                self.accumulate(grads, a, g.clone());
                if self.needs(r) {
                    self.accumulate(grads, r, column_sums(g));
                }
            }
            &Op::MulRow(a, r) => {
                if self.needs(a) {
                    self.accumulate(grads, a, broadcast_row(g, self.value(r), |x, y| x * y));
                }
                if self.needs(r) {
                    let prod = g.zip_map(self.value(a), |x, y| x * y);
                    self.accumulate(grads, r, column_sums(&prod));
                }
            }
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s)),
            &Op::Softmax(a) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = crate::tensor::dot(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, a, dx);
            }
            &Op::LogSoftmax(a) => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for ((d, &ly), &gv) in dx.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *d = gv - ly.exp() * total;
                    }
                }
                self.accumulate(grads, a, dx);
            }
            &Op::LayerNorm(a, eps) => {
                let x = self.value(a);
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                let n = y.cols() as f64;
                for r in 0..y.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = crate::tensor::dot(gr, yr) / n;
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv * (gv - g_mean - yv * gy_mean);
                    }
                }
                self.accumulate(grads, a, dx);
            }
            &Op::Gelu(a) => {
                let dx = g.zip_map(self.value(a), |gv, x| gv * gelu_grad(x));
                self.accumulate(grads, a, dx);
            }
            &Op::Tanh(a) => self.accumulate(grads, a, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
            &Op::Sigmoid(a) => {
                self.accumulate(grads, a, g.zip_map(y, |gv, s| gv * s * (1.0 - s)))
            }
            &Op::Relu(a) => {
                let dx = g.zip_map(self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, a, dx);
            }
            &Op::Log(a) => {
                let dx = g.zip_map(self.value(a), |gv, x| gv / x);
                self.accumulate(grads, a, dx);
            }
            &Op::Clamp(a, lo, hi) => {
                let dx = g.zip_map(self.value(a), |gv, x| if x > lo && x < hi { gv } else { 0.0 });
                self.accumulate(grads, a, dx);
            }
            &Op::RowNorm(a) => {
                let x = self.value(a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = y[(r, 0)];
                    if n > 0.0 {
                        let s = g[(r, 0)] / n;
                        for (d, &xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                            *d = s * xv;
                        }
                    }
                }
                self.accumulate(grads, a, dx);
            }
            &Op::RowNormalize(a) => {
                let x = self.value(a);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = crate::tensor::norm(x.row(r));
                    if n > 0.0 {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner = crate::tensor::dot(yr, gr);
                        for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * inner) / n;
                        }
                    }
                }
                self.accumulate(grads, a, dx);
            }
            Op::Gather(a, flat) => {
                let (r, c) = self.value(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                let dst = dx.as_mut_slice();
                for (&i, &gv) in flat.iter().zip(g.as_slice()) {
                    dst[i] += gv;
                }
                self.accumulate(grads, *a, dx);
            }
            &Op::GroupWeightedSum(w, x) => {
                let wm = self.value(w);
                let xm = self.value(x);
                let (n, k) = wm.shape();
                if self.needs(w) {
                    let mut dw = Matrix::zeros(n, k);
                    for i in 0..n {
                        for j in 0..k {
                            dw[(i, j)] = crate::tensor::dot(g.row(i), xm.row(i * k + j));
                        }
                    }
                    self.accumulate(grads, w, dw);
                }
                if self.needs(x) {
                    let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                    for i in 0..n {
                        for j in 0..k {
                            let wt = wm[(i, j)];
                            for (d, &gv) in dx.row_mut(i * k + j).iter_mut().zip(g.row(i)) {
                                *d = wt * gv;
                            }
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            &Op::Reshape(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(grads, a, g.clone().reshape(r, c));
            }
            &Op::Sum(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(grads, a, Matrix::filled(r, c, g[(0, 0)]));
            }
            &Op::MeanRows(a) => {
                let (r, c) = self.value(a).shape();
                let inv = 1.0 / r as f64;
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    for (d, &gv) in dx.row_mut(i).iter_mut().zip(g.row(0)) {
                        *d = gv * inv;
                    }
                }
                self.accumulate(grads, a, dx);
            }
        }
    }
}

fn broadcast_row(a: &Matrix, r: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(r.rows(), 1, "broadcast operand must be a single row");
    assert_eq!(a.cols(), r.cols(), "broadcast column mismatch");
    let mut out = a.clone();
    let rr = r.row(0);
    for i in 0..out.rows() {
        for (o, &b) in out.row_mut(i).iter_mut().zip(rr) {
            *o = f(*o, b);
        }
    }
    out
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &x) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

fn map_rows(m: &Matrix, f: impl Fn(&[f64], &mut [f64])) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        f(m.row(r), out.row_mut(r));
    }
    out
}
