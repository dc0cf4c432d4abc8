//! Matrix-level reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a per-call tape: every operation appends a node holding its
//! forward value, and [`Graph::backward`] walks the tape in reverse to
//! accumulate adjoints. Nodes built only from constants never receive
//! gradients, so inference-only passes do no backward bookkeeping.
//!
//! Parameters stay immutable while a graph is alive; a graph owns copies of
//! the leaves it was fed, so any number of graphs may be built concurrently
//! from shared parameters.

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, T),
    Sin(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    NormalizeRows { x: Var, norms: Vec<T> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar_value on a non-scalar node");
        m.get(0, 0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "add_row expects a single-row bias");
        assert_eq!(av.cols(), bv.cols(), "add_row column mismatch");
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (x, &y) in value.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *x += y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    /// Multiplies every row of `a` elementwise by the `1 × n` row `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows(), 1, "mul_row expects a single row");
        assert_eq!(av.cols(), bv.cols(), "mul_row column mismatch");
        let mut value = av.clone();
        for i in 0..value.rows() {
            for (x, &y) in value.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *x = *x * y;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MulRow(a, b), ng)
    }

    /// Multiplies row `i` of `a` by `s[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.shape(), (av.rows(), 1), "scale_rows expects an m x 1 column");
        let mut value = av.clone();
        for i in 0..value.rows() {
            let k = sv.get(i, 0);
            value.row_mut(i).iter_mut().for_each(|x| *x = *x * k);
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScaleRows(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.sin());
        let ng = self.ng(a);
        self.push(value, Op::Sin(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise softmax restricted to columns where `mask` is true.
    ///
    /// Masked columns get probability exactly zero; a row with no unmasked
    /// column is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols(), mask.len(), "softmax mask length mismatch");
        let mut value = Matrix::zeros(av.rows(), av.cols());
        for i in 0..av.rows() {
            let row = av.row(i);
            let mut mx = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if mask[j] && x > mx {
                    mx = x;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let out = value.row_mut(i);
            let mut z = T::zero();
            for (j, &x) in row.iter().enumerate() {
                if mask[j] {
                    let e = (x - mx).exp();
                    out[j] = e;
                    z += e;
                }
            }
            out.iter_mut().for_each(|v| *v = *v / z);
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::of(av.cols() as f64);
        let mut value = av.clone();
        let mut inv_std = Vec::with_capacity(av.rows());
        for i in 0..av.rows() {
            let row = value.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let inv = T::one() / (var + T::of(LN_EPS)).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Scales each row to unit L2 norm, `x / sqrt(|x|² + 1e-12)`.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = av.clone();
        let mut norms = Vec::with_capacity(av.rows());
        for i in 0..av.rows() {
            let row = value.row_mut(i);
            let n = (row.iter().map(|&x| x * x).sum::<T>() + T::of(NORM_EPS)).sqrt();
            row.iter_mut().for_each(|x| *x = *x / n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(value, Op::NormalizeRows { x: a, norms }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let value = Matrix::from_fn(av.rows(), len, |i, j| av.get(i, start + j));
        let ng = self.ng(a);
        self.push(value, Op::SliceCols { x: a, start }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let value = Matrix::from_vec(len, av.cols(), av.as_slice()[start * av.cols()..(start + len) * av.cols()].to_vec());
        let ng = self.ng(a);
        self.push(value, Op::SliceRows { x: a, start }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse sweep from a scalar node. The seed adjoint is 1.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let mut acc = |v: Var, m: Matrix<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot => *slot = Some(m),
            }
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    let mut col = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (c, &x) in col.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *c += x;
                        }
                    }
                    acc(*b, col);
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, &y) in ga.row_mut(i).iter_mut().zip(bv.as_slice()) {
                            *x = *x * y;
                        }
                    }
                    acc(*a, ga);
                }
                if self.ng(*b) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for ((c, &x), &y) in gb.as_mut_slice().iter_mut().zip(g.row(i)).zip(av.row(i)) {
                            *c += x * y;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::ScaleRows(a, s) => {
                let sv = self.value(*s);
                if self.ng(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let k = sv.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|x| *x = *x * k);
                    }
                    acc(*a, ga);
                }
                if self.ng(*s) {
                    let av = self.value(*a);
                    let gs = Matrix::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(&x, &y)| x * y).sum()
                    });
                    acc(*s, gs);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Sin(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * y.cos())),
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x * gelu_grad(y))),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (o, (&p, &q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = T::of(y.cols() as f64);
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / n;
                    for (o, (&p, &q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = inv_std[i] * (q - mg - p * mgy);
                    }
                }
                acc(*x, ga);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (o, (&p, &q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (q - p * dot) / norms[i];
                    }
                }
                acc(*x, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        acc(p, Matrix::from_fn(g.rows(), c, |i, j| g.get(i, off + j)));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.ng(p) {
                        let cols = g.cols();
                        acc(p, Matrix::from_vec(r, cols, g.as_slice()[off * cols..(off + r) * cols].to_vec()));
                    }
                    off += r;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*x, gx);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                let cols = xv.cols();
                gx.as_mut_slice()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.as_slice());
                acc(*x, gx);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.get(0, 0) / T::of((r * c) as f64)));
            }
        }
    }
}
