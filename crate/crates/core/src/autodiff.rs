//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its forward value. Nodes only
//! reference earlier nodes, so the tape is always in topological order and
//! [`Tape::backward`] is a single reverse sweep. Contributions from multiple
//! uses of a node are summed.
//!
//! ```
//! use locoop::autodiff::Tape;
//! use locoop::Matrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Matrix::row_vector(vec![0.0, 0.0]));
//! let p = tape.softmax_rows(x, 1.0).unwrap();
//! assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
//! ```

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Value {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    SoftmaxRows(usize, f64),
    Log(usize),
    NormalizeRows(usize),
    EntropyRows(usize),
    CrossEntropyRows(usize, Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    GatherRows(usize, Vec<usize>),
    ConcatRows(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Computation record. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; all zeros when `v` did not influence the output.
    pub fn get(&self, v: Value) -> Matrix {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn check_same(op: &'static str, a: Value, b: Value) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Value {
        let (rows, cols) = value.shape();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Value { id, rows, cols }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Value {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Value {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Value) -> &Matrix {
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Value) -> f64 {
        self.nodes[v.id].value.data()[0]
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a.id) || self.rg(b.id);
        Ok(self.push(Op::MatMul(a.id, b.id), out, rg))
    }

    pub fn transpose(&mut self, a: Value) -> Value {
        let out = self.value(a).transpose();
        let rg = self.rg(a.id);
        self.push(Op::Transpose(a.id), out, rg)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        check_same("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a.id) || self.rg(b.id);
        Ok(self.push(Op::Add(a.id, b.id), out, rg))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        check_same("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= y;
        }
        let rg = self.rg(a.id) || self.rg(b.id);
        Ok(self.push(Op::Sub(a.id, b.id), out, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        check_same("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        let rg = self.rg(a.id) || self.rg(b.id);
        Ok(self.push(Op::Mul(a.id, b.id), out, rg))
    }

    pub fn scale(&mut self, a: Value, s: f64) -> Value {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a.id);
        self.push(Op::Scale(a.id, s), out, rg)
    }

    /// Row-wise `softmax(x / temperature)` with max subtraction.
    pub fn softmax_rows(&mut self, a: Value, temperature: f64) -> Result<Value> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            softmax_into(x.row(r), temperature, out.row_mut(r));
        }
        let rg = self.rg(a.id);
        Ok(self.push(Op::SoftmaxRows(a.id, temperature), out, rg))
    }

    pub fn ln(&mut self, a: Value) -> Value {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a.id);
        self.push(Op::Log(a.id), out, rg)
    }

    /// Divide every row by its L2 norm.
    pub fn normalize_rows(&mut self, a: Value) -> Value {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let n = dot(x.row(r), x.row(r)).sqrt();
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        let rg = self.rg(a.id);
        self.push(Op::NormalizeRows(a.id), out, rg)
    }

    /// Cosine similarity matrix `a · bᵀ` for rows already of unit length.
    pub fn cosine_unit(&mut self, a: Value, b: Value) -> Result<Value> {
        if a.cols != b.cols {
            return Err(Error::ShapeMismatch {
                op: "cosine_unit",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let bt = self.transpose(b);
        self.matmul(a, bt)
    }

    /// Shannon entropy (nats) of every probability row, as a column.
    /// Uses `0·log 0 = 0`.
    pub fn entropy_rows(&mut self, p: Value) -> Value {
        let x = self.value(p);
        let data = x.iter_rows().map(row_entropy).collect::<Vec<_>>();
        let out = Matrix::from_vec(x.rows(), 1, data).expect("column shape");
        let rg = self.rg(p.id);
        self.push(Op::EntropyRows(p.id), out, rg)
    }

    /// `-ln p[r, labels[r]]` per row, as a column.
    pub fn cross_entropy_rows(&mut self, p: Value, labels: &[usize]) -> Result<Value> {
        let x = self.value(p);
        if labels.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_rows",
                left: x.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= x.cols()) {
            return Err(Error::InvalidLabel {
                label: bad as i64,
                classes: x.cols(),
            });
        }
        let data = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -x.get(r, l).ln())
            .collect::<Vec<_>>();
        let out = Matrix::from_vec(x.rows(), 1, data).expect("column shape");
        let rg = self.rg(p.id);
        Ok(self.push(Op::CrossEntropyRows(p.id, labels.to_vec()), out, rg))
    }

    /// Mean over rows: `(r, c) -> (1, c)`.
    pub fn mean_rows(&mut self, a: Value) -> Value {
        let x = self.value(a);
        let mut out = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = x.rows() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        let rg = self.rg(a.id);
        self.push(Op::MeanRows(a.id), Matrix::row_vector(out), rg)
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a.id);
        self.push(Op::Sum(a.id), Matrix::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Value) -> Value {
        let n = (a.rows * a.cols) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn gather_rows(&mut self, a: Value, idx: &[usize]) -> Result<Value> {
        let x = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for {} rows",
                x.rows()
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * x.cols());
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        let out = Matrix::from_vec(idx.len(), x.cols(), data)?;
        let rg = self.rg(a.id);
        Ok(self.push(Op::GatherRows(a.id, idx.to_vec()), out, rg))
    }

    pub fn row(&mut self, a: Value, r: usize) -> Result<Value> {
        self.gather_rows(a, &[r])
    }

    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        for p in &parts[1..] {
            if p.cols != first.cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * first.cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Matrix::from_vec(rows, first.cols, data)?;
        let rg = parts.iter().any(|p| self.rg(p.id));
        Ok(self.push(
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            out,
            rg,
        ))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Value) -> Result<Gradients> {
        if !output.is_scalar() {
            return Err(Error::NonScalarOutput(output.shape()));
        }
        let n = output.id + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.id] = Some(Matrix::scalar(1.0));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |i: usize| &self.nodes[i].value;
        let mut acc = |i: usize, contrib: Matrix| {
            if !self.nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                // C = A·B: dA = G·Bᵀ, dB = Aᵀ·G
                if self.nodes[*a].requires_grad {
                    acc(*a, g.matmul_t(val(*b)).expect("matmul grad"));
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, val(*a).transpose().matmul(g).expect("matmul grad"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (d, y) in da.data_mut().iter_mut().zip(val(*b).data()) {
                    *d *= y;
                }
                let mut db = g.clone();
                for (d, x) in db.data_mut().iter_mut().zip(val(*a).data()) {
                    *d *= x;
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::SoftmaxRows(a, t) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - inner) / t;
                    }
                }
                acc(*a, dx);
            }
            Op::Log(a) => {
                let mut dx = g.clone();
                for (d, x) in dx.data_mut().iter_mut().zip(val(*a).data()) {
                    *d /= x;
                }
                acc(*a, dx);
            }
            Op::NormalizeRows(a) => {
                let (x, y) = (val(*a), &node.value);
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let n = dot(x.row(r), x.row(r)).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let proj = dot(yr, gr);
                    for ((d, &yi), &gi) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gi - yi * proj) / n;
                    }
                }
                acc(*a, dx);
            }
            Op::EntropyRows(a) => {
                // H = -Σ p ln p, dH/dp = -(ln p + 1); zero-probability entries get 0.
                let p = val(*a);
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let gr = g.get(r, 0);
                    for (d, &pi) in dx.row_mut(r).iter_mut().zip(p.row(r)) {
                        *d = if pi > 0.0 { -gr * (pi.ln() + 1.0) } else { 0.0 };
                    }
                }
                acc(*a, dx);
            }
            Op::CrossEntropyRows(a, labels) => {
                let p = val(*a);
                let mut dx = Matrix::zeros(p.rows(), p.cols());
                for (r, &l) in labels.iter().enumerate() {
                    dx.set(r, l, -g.get(r, 0) / p.get(r, l));
                }
                acc(*a, dx);
            }
            Op::MeanRows(a) => {
                let x = val(*a);
                let inv = 1.0 / x.rows() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (d, gi) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = gi * inv;
                    }
                }
                acc(*a, dx);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (d, gi) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += gi;
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                    acc(p, Matrix::from_vec(r, c, slice).expect("concat grad"));
                    offset += r;
                }
            }
        }
    }
}

/// Stable `softmax(x / t)` written into `out`.
pub fn softmax_into(x: &[f64], t: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / t).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Entropy in nats with `0·log 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of the scalar built by `f` at `point`.
///
/// Per coordinate: `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`,
/// with numeric derivatives from central differences of step `1e-5`.
pub fn gradcheck<F>(f: F, point: &Matrix) -> Result<f64>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    const STEP: f64 = 1e-5;
    let eval = |m: &Matrix| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(m.clone());
        let out = f(&mut tape, x)?;
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput(out.shape()));
        }
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x)?;
    let analytic = tape.backward(out)?.get(x);

    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - STEP;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
