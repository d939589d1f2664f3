//! Reverse-mode gradient accumulation over matrix expressions.
//!
//! Operations record onto a linear tape during the forward pass;
//! [`Tape::backward`] replays it in reverse and accumulates `d(loss)/d(param)`
//! into the originating [`ParamStore`] buffers.
//!
//! Shape rules on raw tape ops are programmer contracts and panic via
//! `assert!`; the public module surfaces (`mlp_forward`, the ELBO) validate
//! shapes and return errors instead.

use crate::error::{Error, Result};
use crate::nn::{Matrix, ParamStore};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Row-broadcast add: `(r x c) + (1 x c)`.
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    ConcatCols(usize, usize),
    /// Parent, first column of the slice.
    SliceCols(usize, usize),
    SumRows(usize),
    MeanAll(usize),
}

struct Node {
    value: Matrix,
    op: Op,
    /// Present on parameter leaves; backward routes gradients here.
    param: Option<String>,
}

/// Computation tape. One forward expression per tape instance.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.rows() == 1 && m.cols() == 1 {
            Ok(m.get(0, 0))
        } else {
            Err(Error::State(format!(
                "expected scalar node, got {}x{}",
                m.rows(),
                m.cols()
            )))
        }
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf; backward accumulates into the store buffer of `name`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .expect("matmul shape contract");
        self.push(value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a.0, b.0))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, b) = (self.value(a), self.value(bias));
        assert!(
            b.rows() == 1 && b.cols() == m.cols(),
            "add_row bias shape contract"
        );
        let mut out = m.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            for c in 0..cols {
                let v = out.get(r, c) + b.get(0, c);
                out.set(r, c, v);
            }
        }
        self.push(out, Op::AddRow(a.0, bias.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.map(a, |x| k * x);
        self.push(value, Op::Scale(a.0, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.map(a, |x| x + k);
        self.push(value, Op::AddScalar(a.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| -x);
        self.push(value, Op::Neg(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        self.push(value, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        self.push(value, Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::exp);
        self.push(value, Op::Exp(a.0))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::ln);
        self.push(value, Op::Ln(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x * x);
        self.push(value, Op::Square(a.0))
    }

    /// Clamp to `[lo, hi]`; gradient is 1 inside the interval, 0 outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp interval contract");
        let value = self.map(a, |x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a.0, lo, hi))
    }

    /// Numerically stable row-wise softmax (subtracts the row max).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        softmax_in_place(&mut out);
        self.push(out, Op::SoftmaxRows(a.0))
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = m.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a.0))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = (self.value(a), self.value(b));
        assert_eq!(m.rows(), n.rows(), "concat_cols row contract");
        let mut out = Matrix::zeros(m.rows(), m.cols() + n.cols());
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                out.set(r, c, m.get(r, c));
            }
            for c in 0..n.cols() {
                out.set(r, m.cols() + c, n.get(r, c));
            }
        }
        self.push(out, Op::ConcatCols(a.0, b.0))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "slice_cols range contract");
        let mut out = Matrix::zeros(m.rows(), len);
        for r in 0..m.rows() {
            for c in 0..len {
                out.set(r, c, m.get(r, start + c));
            }
        }
        self.push(out, Op::SliceCols(a.0, start))
    }

    /// Sums across columns: `(r x c) -> (r x 1)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), 1);
        for r in 0..m.rows() {
            let mut s = 0.0;
            for c in 0..m.cols() {
                s += m.get(r, c);
            }
            out.set(r, 0, s);
        }
        self.push(out, Op::SumRows(a.0))
    }

    /// Mean over all entries: `-> (1 x 1)`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = (m.rows() * m.cols()) as f64;
        let s: f64 = m.data().iter().sum();
        let out = Matrix::from_vec(1, 1, vec![s / n]).expect("finite mean");
        self.push(out, Op::MeanAll(a.0))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Matrix {
        let m = self.value(a);
        let mut out = m.clone();
        for v in out.data_mut() {
            *v = f(*v);
        }
        out
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (m, n) = (self.value(a), self.value(b));
        assert!(m.same_shape(n), "elementwise shape contract");
        let mut out = m.clone();
        for (v, w) in out.data_mut().iter_mut().zip(n.data()) {
            *v = f(*v, *w);
        }
        out
    }

    /// Accumulates `d(loss)/d(param)` for every parameter leaf into `store`.
    ///
    /// `loss` must be a `1x1` node on this tape. Repeated calls (across
    /// tapes) accumulate additively until `store.zero_grads()`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State(
                "backward requires a recorded forward computation".into(),
            ));
        }
        {
            let m = self.value(loss);
            if m.rows() != 1 || m.cols() != 1 {
                return Err(Error::State(format!(
                    "backward requires a scalar loss node, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
        }

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at tape node {i}"
                )));
            }
            self.propagate(i, &g, &mut grads);
            if let Some(name) = &self.nodes[i].param {
                store.accumulate_grad(name, &g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let add_to = |grads: &mut [Option<Matrix>], j: usize, delta: Matrix| {
            match &mut grads[j] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot => *slot = Some(delta),
            };
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ma, mb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                // dA = g @ B^T
                let mut da = Matrix::zeros(ma.rows(), ma.cols());
                for r in 0..ma.rows() {
                    for k in 0..ma.cols() {
                        let mut s = 0.0;
                        for c in 0..mb.cols() {
                            s += g.get(r, c) * mb.get(k, c);
                        }
                        da.set(r, k, s);
                    }
                }
                // dB = A^T @ g
                let mut db = Matrix::zeros(mb.rows(), mb.cols());
                for k in 0..mb.rows() {
                    for c in 0..mb.cols() {
                        let mut s = 0.0;
                        for r in 0..ma.rows() {
                            s += ma.get(r, k) * g.get(r, c);
                        }
                        db.set(k, c, s);
                    }
                }
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                let mut n = g.clone();
                for v in n.data_mut() {
                    *v = -*v;
                }
                add_to(grads, *b, n);
            }
            Op::Mul(a, b) => {
                let da = hadamard(g, &self.nodes[*b].value);
                let db = hadamard(g, &self.nodes[*a].value);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::AddRow(a, bias) => {
                add_to(grads, *a, g.clone());
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        db.set(0, c, db.get(0, c) + g.get(r, c));
                    }
                }
                add_to(grads, *bias, db);
            }
            Op::Scale(a, k) => {
                let mut da = g.clone();
                for v in da.data_mut() {
                    *v *= k;
                }
                add_to(grads, *a, da);
            }
            Op::AddScalar(a) => add_to(grads, *a, g.clone()),
            Op::Neg(a) => {
                let mut da = g.clone();
                for v in da.data_mut() {
                    *v = -*v;
                }
                add_to(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let mut da = g.clone();
                for (v, t) in da.data_mut().iter_mut().zip(y.data()) {
                    *v *= 1.0 - t * t;
                }
                add_to(grads, *a, da);
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let mut da = g.clone();
                for (v, xi) in da.data_mut().iter_mut().zip(x.data()) {
                    if *xi <= 0.0 {
                        *v = 0.0;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::Exp(a) => {
                let da = hadamard(g, &self.nodes[i].value);
                add_to(grads, *a, da);
            }
            Op::Ln(a) => {
                let x = &self.nodes[*a].value;
                let mut da = g.clone();
                for (v, xi) in da.data_mut().iter_mut().zip(x.data()) {
                    *v /= xi;
                }
                add_to(grads, *a, da);
            }
            Op::Square(a) => {
                let x = &self.nodes[*a].value;
                let mut da = g.clone();
                for (v, xi) in da.data_mut().iter_mut().zip(x.data()) {
                    *v *= 2.0 * xi;
                }
                add_to(grads, *a, da);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[*a].value;
                let mut da = g.clone();
                for (v, xi) in da.data_mut().iter_mut().zip(x.data()) {
                    if *xi < *lo || *xi > *hi {
                        *v = 0.0;
                    }
                }
                add_to(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let mut dot = 0.0;
                    for c in 0..g.cols() {
                        dot += g.get(r, c) * y.get(r, c);
                    }
                    for c in 0..g.cols() {
                        da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                add_to(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut da = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let mut sum = 0.0;
                    for c in 0..g.cols() {
                        sum += g.get(r, c);
                    }
                    for c in 0..g.cols() {
                        da.set(r, c, g.get(r, c) - y.get(r, c).exp() * sum);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.cols();
                let cb = self.nodes[*b].value.cols();
                let mut da = Matrix::zeros(g.rows(), ca);
                let mut db = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    for c in 0..ca {
                        da.set(r, c, g.get(r, c));
                    }
                    for c in 0..cb {
                        db.set(r, c, g.get(r, ca + c));
                    }
                }
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::SliceCols(a, start) => {
                let parent = &self.nodes[*a].value;
                let mut da = Matrix::zeros(parent.rows(), parent.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(r, start + c, g.get(r, c));
                    }
                }
                add_to(grads, *a, da);
            }
            Op::SumRows(a) => {
                let parent = &self.nodes[*a].value;
                let mut da = Matrix::zeros(parent.rows(), parent.cols());
                for r in 0..parent.rows() {
                    for c in 0..parent.cols() {
                        da.set(r, c, g.get(r, 0));
                    }
                }
                add_to(grads, *a, da);
            }
            Op::MeanAll(a) => {
                let parent = &self.nodes[*a].value;
                let n = (parent.rows() * parent.cols()) as f64;
                let mut da = Matrix::zeros(parent.rows(), parent.cols());
                let gv = g.get(0, 0) / n;
                da.fill(gv);
                add_to(grads, *a, da);
            }
        }
    }
}

/// Row-wise stable softmax, in place.
pub fn softmax_in_place(m: &mut Matrix) {
    let cols = m.cols();
    for r in 0..m.rows() {
        let row = &mut m.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (v, w) in out.data_mut().iter_mut().zip(b.data()) {
        *v *= w;
    }
    out
}
