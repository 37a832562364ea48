//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Forward-mode quantities (Jacobian-vector products) are expressed as
//! ordinary graph operations, so their parameter gradients come out of the
//! same reverse pass. This is what lets the Jacobian regulariser be trained.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use crate::mesh::SparseRows;
use crate::recoupler::transforms;

pub type Mat = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise functions with known derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Elu,
    /// Derivative of ELU (alpha = 1).
    EluDeriv,
    Relu,
    Exp,
    Square,
    /// Clamped standard normal CDF.
    NormalCdf,
    /// Derivative of the clamped CDF: the density, zero where clamped.
    NormalCdfDeriv,
    ProductToNormal,
    ProductToNormalDeriv,
    /// Clamp to `[lo, hi]`; zero gradient outside.
    Clamp(f64, f64),
}

impl Unary {
    fn value(self, x: f64) -> f64 {
        match self {
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::EluDeriv => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::NormalCdf => transforms::gaussian_to_uniform(x),
            Unary::NormalCdfDeriv => transforms::gaussian_to_uniform_deriv(x),
            Unary::ProductToNormal => transforms::product_to_normal(x),
            Unary::ProductToNormalDeriv => transforms::product_to_normal_deriv(x),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// d value / dx, given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::EluDeriv => {
                if x > 0.0 {
                    0.0
                } else {
                    y
                }
            }
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::NormalCdf => transforms::gaussian_to_uniform_deriv(x),
            Unary::NormalCdfDeriv => {
                // density is zero on the clamped flat spot
                if y == 0.0 {
                    0.0
                } else {
                    -x * y
                }
            }
            Unary::ProductToNormal => transforms::product_to_normal_deriv(x),
            Unary::ProductToNormalDeriv => transforms::product_to_normal_second_deriv(x),
            Unary::Clamp(lo, hi) => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Outer(Var, Var),
    RowNormalize(Var),
    SumCols(Var),
    Sum(Var),
    Gather { x: Var, spirals: Arc<Vec<Vec<usize>>>, rows_in: usize },
    Pool { x: Var, op: Arc<SparseRows> },
    InstanceNorm { x: Var, per_sample: usize, inv_std: Mat },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records operations for a single forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `(1, m)` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// Multiplies row `i` of `a` by `col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let value = self.value(a) * self.value(col);
        let ng = self.needs(a) || self.needs(col);
        self.push(value, Op::MulCol(a, col), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let value = self.value(a).mapv(|x| f.value(x));
        let ng = self.needs(a);
        self.push(value, Op::Unary(a, f), ng)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    /// Row-wise outer product: `(n, p) x (n, q) -> (n, p*q)`, index `i*q + j`.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, p) = av.dim();
        let q = bv.ncols();
        assert_eq!(bv.nrows(), n, "outer: row mismatch");
        let mut value = Mat::zeros((n, p * q));
        for r in 0..n {
            for i in 0..p {
                let ai = av[[r, i]];
                for j in 0..q {
                    value[[r, i * q + j]] = ai * bv[[r, j]];
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Outer(a, b), ng)
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|x| x / n);
        }
        let ng = self.needs(a);
        self.push(value, Op::RowNormalize(a), ng)
    }

    /// `(n, m) -> (n, 1)`
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// Sum of all entries as a `(1, 1)` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Spiral gather. `x` holds `rows_in` vertex rows per sample; output row
    /// `(b, v)` concatenates the rows of `spirals[v]`, zeros for padding.
    pub fn gather(&mut self, x: Var, spirals: Arc<Vec<Vec<usize>>>, rows_in: usize) -> Var {
        let xv = self.value(x);
        let c = xv.ncols();
        let batch = xv.nrows() / rows_in;
        let len = spirals.first().map_or(0, |s| s.len());
        let v_out = spirals.len();
        let mut value = Mat::zeros((batch * v_out, len * c));
        for b in 0..batch {
            for (v, spiral) in spirals.iter().enumerate() {
                let mut dst = value.row_mut(b * v_out + v);
                for (l, &src) in spiral.iter().enumerate() {
                    if src < rows_in {
                        let s = xv.row(b * rows_in + src);
                        dst.slice_mut(ndarray::s![l * c..(l + 1) * c]).assign(&s);
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Gather { x, spirals, rows_in }, ng)
    }

    /// Applies a sparse `(v_out, v_in)` operator to every sample.
    pub fn pool(&mut self, x: Var, op: Arc<SparseRows>) -> Var {
        let xv = self.value(x);
        let c = xv.ncols();
        let batch = xv.nrows() / op.cols;
        let v_out = op.rows.len();
        let mut value = Mat::zeros((batch * v_out, c));
        for b in 0..batch {
            for (r, row) in op.rows.iter().enumerate() {
                let mut dst = value.row_mut(b * v_out + r);
                for &(src, w) in row {
                    dst.scaled_add(w, &xv.row(b * op.cols + src));
                }
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::Pool { x, op }, ng)
    }

    /// Normalises every channel over the `per_sample` vertex rows of each sample.
    pub fn instance_norm(&mut self, x: Var, per_sample: usize) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (rows, c) = xv.dim();
        let batch = rows / per_sample;
        let mut value = Mat::zeros((rows, c));
        let mut inv_std = Mat::zeros((batch, c));
        for b in 0..batch {
            let block = xv.slice(ndarray::s![b * per_sample..(b + 1) * per_sample, ..]);
            let mean = block.mean_axis(Axis(0)).expect("non-empty");
            let centered = &block - &mean;
            let var = centered.mapv(|d| d * d).mean_axis(Axis(0)).expect("non-empty");
            let inv = var.mapv(|v| 1.0 / (v + EPS).sqrt());
            value
                .slice_mut(ndarray::s![b * per_sample..(b + 1) * per_sample, ..])
                .assign(&(&centered * &inv));
            inv_std.row_mut(b).assign(&inv);
        }
        let ng = self.needs(x);
        self.push(value, Op::InstanceNorm { x, per_sample, inv_std }, ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(x).iter().copied().collect();
        let value = Mat::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Reverse pass from a `(1, 1)` output.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::ones(self.nodes[output.0].value.dim()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.dot(val(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * val(*b));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, col) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g * val(*col));
                }
                if self.needs(*col) {
                    let gc = (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::Unary(a, f) => {
                let mut d = val(*a).clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .and(g)
                    .for_each(|x, &y, &gy| *x = gy * f.deriv(*x, y));
                self.accumulate(grads, *a, d);
            }
            Op::Outer(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, p) = av.dim();
                let q = bv.ncols();
                let mut ga = Mat::zeros((n, p));
                let mut gb = Mat::zeros((n, q));
                for r in 0..n {
                    for i in 0..p {
                        for j in 0..q {
                            let gij = g[[r, i * q + j]];
                            ga[[r, i]] += gij * bv[[r, j]];
                            gb[[r, j]] += gij * av[[r, i]];
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::RowNormalize(a) => {
                let raw = val(*a);
                let mut d = Mat::zeros(raw.dim());
                for ((raw_row, unit), (gr, mut out)) in raw
                    .rows()
                    .into_iter()
                    .zip(node.value.rows())
                    .zip(g.rows().into_iter().zip(d.rows_mut()))
                {
                    let n = raw_row.dot(&raw_row).sqrt().max(1e-12);
                    let proj = unit.dot(&gr);
                    out.assign(&((&gr - &(&unit * proj)) / n));
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumCols(a) => {
                let shape = val(*a).dim();
                let d = Mat::from_shape_fn(shape, |(r, _)| g[[r, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Mat::from_elem(val(*a).dim(), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::Gather { x, spirals, rows_in } => {
                let xv = val(*x);
                let c = xv.ncols();
                let batch = xv.nrows() / rows_in;
                let v_out = spirals.len();
                let mut d = Mat::zeros(xv.dim());
                for b in 0..batch {
                    for (v, spiral) in spirals.iter().enumerate() {
                        let src_row = g.row(b * v_out + v);
                        for (l, &dst) in spiral.iter().enumerate() {
                            if dst < *rows_in {
                                let mut out = d.row_mut(b * rows_in + dst);
                                out += &src_row.slice(ndarray::s![l * c..(l + 1) * c]);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Pool { x, op } => {
                let xv = val(*x);
                let batch = xv.nrows() / op.cols;
                let v_out = op.rows.len();
                let mut d = Mat::zeros(xv.dim());
                for b in 0..batch {
                    for (r, row) in op.rows.iter().enumerate() {
                        let gr = g.row(b * v_out + r);
                        for &(src, w) in row {
                            d.row_mut(b * op.cols + src).scaled_add(w, &gr);
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::InstanceNorm { x, per_sample, inv_std } => {
                let y = &node.value;
                let (rows, _) = y.dim();
                let mut d = Mat::zeros(y.dim());
                for b in 0..rows / per_sample {
                    let range = ndarray::s![b * per_sample..(b + 1) * per_sample, ..];
                    let gy = g.slice(range);
                    let yb = y.slice(range);
                    let mean_g = gy.mean_axis(Axis(0)).expect("non-empty");
                    let mean_gy = (&gy * &yb).mean_axis(Axis(0)).expect("non-empty");
                    let inv = inv_std.row(b);
                    let block = (&gy - &mean_g - &(&yb * &mean_gy)) * inv;
                    d.slice_mut(range).assign(&block);
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => {
                let shape = val(*x).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                self.accumulate(grads, *x, Mat::from_shape_vec(shape, flat).expect("same size"));
            }
        }
    }
}
