//! Wengert tape with matrix-valued nodes.
//!
//! Every node holds a dense `rows × cols` value; scalars are `1 × 1`.
//! Element-wise binary ops broadcast along any axis of extent one, so a
//! `1 × d` parameter row combines directly with a `B × d` batch.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;

use super::DiffError;

pub type Matrix = DMatrix<f64>;

/// Element-wise scalar functions with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Ln,
    Tanh,
    Sinh,
    Cosh,
    Asinh,
    Softplus,
    Sigmoid,
    Sqrt,
    Square,
    Abs,
    Recip,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sinh => x.sinh(),
            Unary::Cosh => x.cosh(),
            Unary::Asinh => x.asinh(),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Recip => 1.0 / x,
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sinh => x.cosh(),
            Unary::Cosh => x.sinh(),
            Unary::Asinh => 1.0 / (x * x + 1.0).sqrt(),
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Recip => -y * y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Tanh => "tanh",
            Unary::Sinh => "sinh",
            Unary::Cosh => "cosh",
            Unary::Asinh => "asinh",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Abs => "abs",
            Unary::Recip => "recip",
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    Unary(usize, Unary),
    Powf(usize, f64),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    Slice { src: usize, r0: usize, c0: usize },
    HCat(Vec<usize>),
    VCat(Vec<usize>),
    Cholesky(usize),
    SolveLower { l: usize, b: usize, transpose: bool },
    Diag(usize),
    DiagEmbed(usize),
    TrilStrict(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Unary(_, u) => u.name(),
            Op::Powf(..) => "powf",
            Op::ClampMin(..) => "clamp_min",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Slice { .. } => "slice",
            Op::HCat(_) => "hcat",
            Op::VCat(_) => "vcat",
            Op::Cholesky(_) => "cholesky",
            Op::SolveLower { .. } => "solve_triangular",
            Op::Diag(_) => "diag",
            Op::DiagEmbed(_) => "diag_embed",
            Op::TrilStrict(_) => "tril_strict",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records primitive operations for a single reverse pass.
///
/// Operations never fail eagerly: a failed Cholesky stores NaNs and latches
/// the first error, which [`Tape::check`] reports.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    error: RefCell<Option<DiffError>>,
    context: RefCell<Option<String>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var(#{}, {}x{})", self.idx, r, c)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Independent input (parameter or constant).
    pub fn leaf(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Matrix::from_element(1, 1, value))
    }

    pub fn row(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Matrix::from_row_slice(1, values.len(), values))
    }

    pub fn column(&self, values: &[f64]) -> Var<'_> {
        self.leaf(Matrix::from_column_slice(values.len(), 1, values))
    }

    /// Label attached to errors latched while it is set.
    pub fn set_context(&self, label: Option<&str>) {
        *self.context.borrow_mut() = label.map(str::to_owned);
    }

    fn latch(&self, err: DiffError) {
        let mut slot = self.error.borrow_mut();
        if slot.is_none() {
            *slot = Some(err);
        }
    }

    /// First latched error, if any.
    pub fn check(&self) -> Result<(), DiffError> {
        match self.error.borrow().as_ref() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    /// Locates the first node whose value is not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    fn value_of(&self, idx: usize) -> Matrix {
        self.nodes.borrow()[idx].value.clone()
    }

    fn unary_op(&self, x: usize, u: Unary) -> Var<'_> {
        let v = self.nodes.borrow()[x].value.map(|a| u.apply(a));
        self.push(v, Op::Unary(x, u))
    }

    fn binary(&self, a: usize, b: usize, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'_> {
        let v = {
            let nodes = self.nodes.borrow();
            zip_broadcast(&nodes[a].value, &nodes[b].value, f, op.name())
        };
        self.push(v, op)
    }

    pub fn hcat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "hcat of nothing");
        let v = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].idx].value.nrows();
            let cols: usize = parts.iter().map(|p| nodes[p.idx].value.ncols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut c0 = 0;
            for p in parts {
                let m = &nodes[p.idx].value;
                assert_eq!(m.nrows(), rows, "hcat row mismatch");
                out.view_mut((0, c0), (rows, m.ncols())).copy_from(m);
                c0 += m.ncols();
            }
            out
        };
        self.push(v, Op::HCat(parts.iter().map(|p| p.idx).collect()))
    }

    pub fn vcat<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "vcat of nothing");
        let v = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].idx].value.ncols();
            let rows: usize = parts.iter().map(|p| nodes[p.idx].value.nrows()).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut r0 = 0;
            for p in parts {
                let m = &nodes[p.idx].value;
                assert_eq!(m.ncols(), cols, "vcat column mismatch");
                out.view_mut((r0, 0), (m.nrows(), cols)).copy_from(m);
                r0 += m.nrows();
            }
            out
        };
        self.push(v, Op::VCat(parts.iter().map(|p| p.idx).collect()))
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn gradients(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.idx].value;
        assert_eq!(out.shape(), (1, 1), "gradients need a scalar output");
        let mut adj: Vec<Option<Matrix>> = vec![None; output.idx + 1];
        adj[output.idx] = Some(Matrix::from_element(1, 1, 1.0));
        for i in (0..=output.idx).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            backward_node(&nodes, node, i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Gradients { adj }
    }
}

/// Adjoints of every node up to the differentiated output.
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    /// d output / d var; zeros when `var` does not influence the output.
    pub fn wrt(&self, var: Var<'_>) -> Matrix {
        match self.adj.get(var.idx).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Matrix::zeros(r, c)
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut adj[idx] {
        Some(existing) => *existing += g,
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize), what: &str) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("{what}: incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn zip_broadcast(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64, what: &str) -> Matrix {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let (r, c) = broadcast_shape(a.shape(), b.shape(), what);
    Matrix::from_fn(r, c, |i, j| f(at(a, i, j), at(b, i, j)))
}

#[inline]
fn at(m: &Matrix, i: usize, j: usize) -> f64 {
    let ii = if m.nrows() == 1 { 0 } else { i };
    let jj = if m.ncols() == 1 { 0 } else { j };
    m[(ii, jj)]
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g;
    }
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = row_sum(&g);
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = col_sum(&g);
    }
    g
}

fn row_sum(m: &Matrix) -> Matrix {
    Matrix::from_fn(1, m.ncols(), |_, j| m.column(j).sum())
}

fn col_sum(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.nrows(), 1, |i, _| m.row(i).sum())
}

/// `g ∘ broadcast(m)` where `g` has the full output shape.
fn scale_by(g: &Matrix, m: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if g.shape() == m.shape() {
        return g.zip_map(m, f);
    }
    Matrix::from_fn(g.nrows(), g.ncols(), |i, j| f(g[(i, j)], at(m, i, j)))
}

fn solve_lower(l: &Matrix, b: &Matrix, transpose: bool) -> Matrix {
    let mut x = b.clone();
    let ok = if transpose {
        l.tr_solve_lower_triangular_mut(&mut x)
    } else {
        l.solve_lower_triangular_mut(&mut x)
    };
    if !ok {
        x.fill(f64::NAN);
    }
    x
}

fn tril(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in 0..j.min(out.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

fn backward_node(nodes: &[Node], node: &Node, _i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
    let val = |k: usize| &nodes[k].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(adj, *a, reduce_to(g.clone(), val(*a).shape()));
            accumulate(adj, *b, reduce_to(g.clone(), val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(adj, *a, reduce_to(g.clone(), val(*a).shape()));
            accumulate(adj, *b, reduce_to(-g, val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let ga = scale_by(g, val(*b), |x, y| x * y);
            let gb = scale_by(g, val(*a), |x, y| x * y);
            accumulate(adj, *a, reduce_to(ga, val(*a).shape()));
            accumulate(adj, *b, reduce_to(gb, val(*b).shape()));
        }
        Op::Div(a, b) => {
            let ga = scale_by(g, val(*b), |x, y| x / y);
            // d(a/b)/db = -(a/b)/b = -out/b
            let gout = scale_by(g, &node.value, |x, y| x * y);
            let gb = scale_by(&gout, val(*b), |x, y| -x / y);
            accumulate(adj, *a, reduce_to(ga, val(*a).shape()));
            accumulate(adj, *b, reduce_to(gb, val(*b).shape()));
        }
        Op::Neg(a) => accumulate(adj, *a, -g),
        Op::Scale(a, s) => accumulate(adj, *a, g * *s),
        Op::Shift(a) => accumulate(adj, *a, g.clone()),
        Op::Unary(a, u) => {
            let x = val(*a);
            let y = &node.value;
            let d = Matrix::from_fn(x.nrows(), x.ncols(), |i, j| {
                g[(i, j)] * u.deriv(x[(i, j)], y[(i, j)])
            });
            accumulate(adj, *a, d);
        }
        Op::Powf(a, p) => {
            let x = val(*a);
            let d = g.zip_map(x, |gi, xi| gi * p * xi.powf(p - 1.0));
            accumulate(adj, *a, d);
        }
        Op::ClampMin(a, lo) => {
            let x = val(*a);
            let d = g.zip_map(x, |gi, xi| if xi > *lo { gi } else { 0.0 });
            accumulate(adj, *a, d);
        }
        Op::MatMul(a, b) => {
            accumulate(adj, *a, g * val(*b).transpose());
            accumulate(adj, *b, val(*a).transpose() * g);
        }
        Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(adj, *a, Matrix::from_element(r, c, g[(0, 0)]));
        }
        Op::SumRows(a) => {
            let (r, c) = val(*a).shape();
            accumulate(adj, *a, Matrix::from_fn(r, c, |_, j| g[(0, j)]));
        }
        Op::SumCols(a) => {
            let (r, c) = val(*a).shape();
            accumulate(adj, *a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
        }
        Op::Slice { src, r0, c0 } => {
            let (r, c) = val(*src).shape();
            let mut full = Matrix::zeros(r, c);
            full.view_mut((*r0, *c0), g.shape()).copy_from(g);
            accumulate(adj, *src, full);
        }
        Op::HCat(parts) => {
            let mut c0 = 0;
            for p in parts {
                let w = val(*p).ncols();
                accumulate(adj, *p, g.columns(c0, w).into_owned());
                c0 += w;
            }
        }
        Op::VCat(parts) => {
            let mut r0 = 0;
            for p in parts {
                let h = val(*p).nrows();
                accumulate(adj, *p, g.rows(r0, h).into_owned());
                r0 += h;
            }
        }
        Op::Cholesky(a) => {
            // A = L Lᵀ:  Ā = sym( L⁻ᵀ Φ(Lᵀ L̄) L⁻¹ ),  Φ = lower triangle with halved diagonal.
            let l = &node.value;
            let gl = tril(g);
            let mut phi = tril(&(l.transpose() * gl));
            for k in 0..phi.nrows() {
                phi[(k, k)] *= 0.5;
            }
            let tmp = solve_lower(l, &phi, true);
            let s = solve_lower(l, &tmp.transpose(), true).transpose();
            let sym = (&s + s.transpose()) * 0.5;
            accumulate(adj, *a, sym);
        }
        Op::SolveLower { l, b, transpose } => {
            let lm = val(*l);
            let x = &node.value;
            let gb = solve_lower(lm, g, !*transpose);
            let gl = if *transpose {
                -tril(&(x * gb.transpose()))
            } else {
                -tril(&(&gb * x.transpose()))
            };
            accumulate(adj, *l, gl);
            accumulate(adj, *b, gb);
        }
        Op::Diag(a) => {
            let n = val(*a).nrows();
            let mut d = Matrix::zeros(n, val(*a).ncols());
            for k in 0..g.nrows() {
                d[(k, k)] = g[(k, 0)];
            }
            accumulate(adj, *a, d);
        }
        Op::DiagEmbed(a) => {
            let n = val(*a).nrows();
            accumulate(adj, *a, Matrix::from_fn(n, 1, |k, _| g[(k, k)]));
        }
        Op::TrilStrict(a) => {
            let mut d = tril(g);
            for k in 0..d.nrows().min(d.ncols()) {
                d[(k, k)] = 0.0;
            }
            accumulate(adj, *a, d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn value(&self) -> Matrix {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.shape()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.idx].value;
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    /// A new leaf on the same tape holding `value`.
    pub fn constant(&self, value: Matrix) -> Var<'t> {
        self.tape.leaf(value)
    }

    pub fn unary(self, u: Unary) -> Var<'t> {
        self.tape.unary_op(self.idx, u)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Ln)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn sinh(self) -> Var<'t> {
        self.unary(Unary::Sinh)
    }
    pub fn cosh(self) -> Var<'t> {
        self.unary(Unary::Cosh)
    }
    pub fn asinh(self) -> Var<'t> {
        self.unary(Unary::Asinh)
    }
    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    pub fn abs(self) -> Var<'t> {
        self.unary(Unary::Abs)
    }
    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let v = self.value().map(|x| x.powf(p));
        self.tape.push(v, Op::Powf(self.idx, p))
    }

    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(lo));
        self.tape.push(v, Op::ClampMin(self.idx, lo))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value() * s;
        self.tape.push(v, Op::Scale(self.idx, s))
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        let v = self.value().add_scalar(c);
        self.tape.push(v, Op::Shift(self.idx))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.idx].value, &nodes[rhs.idx].value);
            assert_eq!(a.ncols(), b.nrows(), "matmul: {:?} x {:?}", a.shape(), b.shape());
            a * b
        };
        self.tape.push(v, Op::MatMul(self.idx, rhs.idx))
    }

    pub fn t(self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.push(v, Op::Transpose(self.idx))
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(self) -> Var<'t> {
        let v = Matrix::from_element(1, 1, self.value().sum());
        self.tape.push(v, Op::Sum(self.idx))
    }

    /// Column totals, `1 × c`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = row_sum(&self.value());
        self.tape.push(v, Op::SumRows(self.idx))
    }

    /// Row totals, `r × 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let v = col_sum(&self.value());
        self.tape.push(v, Op::SumCols(self.idx))
    }

    pub fn slice(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.idx].value.view((r0, c0), (rows, cols)).into_owned()
        };
        self.tape.push(v, Op::Slice { src: self.idx, r0, c0 })
    }

    pub fn col(self, j: usize) -> Var<'t> {
        let r = self.shape().0;
        self.slice(0, j, r, 1)
    }

    pub fn cols(self, j: usize, n: usize) -> Var<'t> {
        let r = self.shape().0;
        self.slice(0, j, r, n)
    }

    pub fn row_at(self, i: usize) -> Var<'t> {
        let c = self.shape().1;
        self.slice(i, 0, 1, c)
    }

    pub fn rows_at(self, i: usize, n: usize) -> Var<'t> {
        let c = self.shape().1;
        self.slice(i, 0, n, c)
    }

    pub fn entry(self, i: usize, j: usize) -> Var<'t> {
        self.slice(i, j, 1, 1)
    }

    /// Lower Cholesky factor. A non positive-definite input latches
    /// [`DiffError::NotPositiveDefinite`] and yields NaNs.
    pub fn cholesky(self) -> Var<'t> {
        let a = self.value();
        let n = a.nrows();
        let v = match a.cholesky() {
            Some(c) => c.unpack(),
            None => {
                let context = self.tape.context.borrow().clone();
                self.tape.latch(DiffError::NotPositiveDefinite { node: self.idx, context });
                Matrix::from_element(n, n, f64::NAN)
            }
        };
        self.tape.push(v, Op::Cholesky(self.idx))
    }

    /// `L⁻¹ B` with `self = L` lower triangular.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        let v = solve_lower(&self.value(), &b.value(), false);
        self.tape.push(v, Op::SolveLower { l: self.idx, b: b.idx, transpose: false })
    }

    /// `L⁻ᵀ B` with `self = L` lower triangular.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        let v = solve_lower(&self.value(), &b.value(), true);
        self.tape.push(v, Op::SolveLower { l: self.idx, b: b.idx, transpose: true })
    }

    /// Main diagonal as an `n × 1` column.
    pub fn diag(self) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let m = &nodes[self.idx].value;
            let n = m.nrows().min(m.ncols());
            Matrix::from_fn(n, 1, |k, _| m[(k, k)])
        };
        self.tape.push(v, Op::Diag(self.idx))
    }

    /// `n × 1` column to an `n × n` diagonal matrix.
    pub fn diag_embed(self) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            let c = &nodes[self.idx].value;
            let n = c.nrows();
            Matrix::from_fn(n, n, |i, j| if i == j { c[(i, 0)] } else { 0.0 })
        };
        self.tape.push(v, Op::DiagEmbed(self.idx))
    }

    /// Strictly lower triangular part.
    pub fn tril_strict(self) -> Var<'t> {
        let mut v = tril(&self.value());
        for k in 0..v.nrows().min(v.ncols()) {
            v[(k, k)] = 0.0;
        }
        self.tape.push(v, Op::TrilStrict(self.idx))
    }

    pub fn trace(self) -> Var<'t> {
        self.diag().sum()
    }

    /// `log |det(L Lᵀ)|` for a triangular factor `self = L`.
    pub fn chol_logdet(self) -> Var<'t> {
        self.diag().abs().ln().sum().scale(2.0)
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $op:ident, $f:expr) => {
        impl<'t> $trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.binary(self.idx, rhs.idx, $f, Op::$op(self.idx, rhs.idx))
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);
binop!(Mul, mul, Mul, |a, b| a * b);
binop!(Div, div, Div, |a, b| a / b);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = -self.value();
        self.tape.push(v, Op::Neg(self.idx))
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, c: f64) -> Var<'t> {
        self.shift(c)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, c: f64) -> Var<'t> {
        self.shift(-c)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, c: f64) -> Var<'t> {
        self.scale(c)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, c: f64) -> Var<'t> {
        self.scale(1.0 / c)
    }
}
