//! Reverse-mode differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records every operation as it is evaluated. [`Tape::backward`]
//! walks the record in reverse once and returns gradients for every node that
//! depends on a leaf created with [`Tape::param`].

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + 1·row`, row is `1 × n`
    AddRow(Var, Var),
    /// `a ⊙ 1·row`, row is `1 × n`
    MulRow(Var, Var),
    /// `a[i, :] / d[i, 0]`
    DivRows(Var, Var),
    RowSums(Var),
    Tanh(Var),
    Sigmoid(Var),
    /// Softmax down each column.
    SoftmaxCols(Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    SumSquares(Var),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    /// Gradient of `v`; `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, with zeros standing in for "no dependence".
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.0
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
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
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMulNt(a, b), ng)
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

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1 x n row");
        let value = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1 x n row");
        let value = self.value(a) * self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(value, Op::MulRow(a, row), ng)
    }

    pub fn div_rows(&mut self, a: Var, d: Var) -> Var {
        assert_eq!(self.shape(d), (self.shape(a).0, 1), "div_rows expects r x 1");
        let value = self.value(a) / self.value(d);
        let ng = self.needs(a) || self.needs(d);
        self.push(value, Op::DivRows(a, d), ng)
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(a);
        self.push(value, Op::RowSums(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let value = softmax_columns(self.value(a));
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxCols(a), ng)
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape must preserve size");
        let flat: Vec<f64> = src.iter().copied().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("size checked");
        let ng = self.needs(a);
        self.push(value, Op::Reshape(a), ng)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), rows);
        let ng = self.needs(a);
        self.push(value, Op::SelectRows(a, rows.to_vec()), ng)
    }

    /// `Σ a²` as a `1 × 1` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum::<f64>();
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumSquares(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Reverse pass from a scalar. A tape can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(r, c));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Array2<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let wants = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[b.0], val(*a).t().dot(&g));
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.dot(&val(*b).t()));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.t().dot(val(*a)));
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g.dot(val(*b)));
                    }
                }
                Op::Add(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[b.0], -&g);
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[b.0], &g * val(*a));
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], &g * val(*b));
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::MulRow(a, row) => {
                    if wants(*row) {
                        let d = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[row.0], d);
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], &g * val(*row));
                    }
                }
                Op::DivRows(a, d) => {
                    let dv = val(*d);
                    if wants(*d) {
                        let out = &node.value;
                        // d(a/d)/dd = -a/d² = -out/d
                        let gd = -((&g * out).sum_axis(Axis(1)).insert_axis(Axis(1)) / dv);
                        accumulate(&mut grads[d.0], gd);
                    }
                    if wants(*a) {
                        accumulate(&mut grads[a.0], &g / dv);
                    }
                }
                Op::RowSums(a) => {
                    let shape = val(*a).raw_dim();
                    let ga = g.broadcast(shape).expect("r x 1 broadcasts").to_owned();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxCols(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = y * &(&g - &dot);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let ga = Array2::from_shape_vec(shape, flat).expect("size preserved");
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Array2::zeros(val(*a).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumSquares(a) => {
                    accumulate(&mut grads[a.0], val(*a) * (2.0 * g[[0, 0]]));
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads[a.0], g * *c);
                }
            }
        }
        Ok(Gradients(grads))
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

/// Numerically stable softmax down every column.
pub fn softmax_columns(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        col.mapv_inplace(|x| (x - max).exp());
        let total = col.sum();
        col.mapv_inplace(|x| x / total);
    }
    out
}
