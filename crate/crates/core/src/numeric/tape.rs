//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records each primitive as it is evaluated. [`Tape::backward`]
//! walks the record once, in exact reverse order, and accumulates
//! `∂loss/∂value` into the [`ParamStore`] gradients of every parameter the
//! loss depends on.

use super::matrix::{row_softmax, sigmoid, Matrix};
use super::NumericError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a [`Parameter`] inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Owns every trainable tensor of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_scale: Vec<f64>,
        exact_scale: Vec<bool>,
    },
    PairSum(Var, Var),
    Reshape(Var),
    /// Scalar reduction whose derivative w.r.t. its input was computed in
    /// the forward pass.
    Reduce { input: Var, coeff: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward evaluation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    swept: bool,
    kink_margin: f64,
    branches: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

/// Lower bound on the per-row standard deviation used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            swept: false,
            kink_margin: f64::INFINITY,
            branches: FNV_OFFSET,
        }
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

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    /// Smallest distance of any recorded non-smooth op input to its kink
    /// (ReLU at 0, clamp bounds, L1 at equality). Finite differences with a
    /// step well below this value never straddle a kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Hash of the side every non-smooth op input fell on. Two forward
    /// passes with equal signatures took the same branch everywhere, so the
    /// loss is smooth on the segment between them (up to hash collisions).
    pub fn branch_signature(&self) -> u64 {
        self.branches
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

    /// Records signed distances to kinks: the magnitude feeds the margin,
    /// the sign feeds the branch signature.
    fn note_kinks(&mut self, signed: impl IntoIterator<Item = f64>) {
        for d in signed {
            self.kink_margin = self.kink_margin.min(d.abs());
            self.branches = (self.branches ^ u64::from(d > 0.0)).wrapping_mul(FNV_PRIME);
        }
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Adds a 1×cols row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericError> {
        let (am, rm) = (self.value(a), self.value(row));
        if rm.rows() != 1 || rm.cols() != am.cols() {
            return Err(NumericError::Shape {
                op: "add_row",
                left: am.shape(),
                right: rm.shape(),
            });
        }
        let mut v = am.clone();
        let bias = rm.row(0).to_vec();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(v, Op::AddRow(a, row), ng))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let v = self.value(a).hadamard(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Hadamard(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 });
        let signed = x.data().to_vec();
        let ng = self.needs(a);
        self.note_kinks(signed);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let v = row_softmax(self.value(a));
        let ng = self.needs(a);
        self.push(v, Op::RowSoftmax(a), ng)
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// elementwise affine map. Rows whose standard deviation falls below
    /// [`LAYER_NORM_EPS`] are divided by the epsilon instead, so a constant
    /// row normalizes to zeros.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericError> {
        let xm = self.value(x);
        let cols = xm.cols();
        for p in [gain, bias] {
            let pm = self.value(p);
            if pm.shape() != (1, cols) {
                return Err(NumericError::Shape {
                    op: "layer_norm",
                    left: xm.shape(),
                    right: pm.shape(),
                });
            }
        }
        let mut normalized = Matrix::zeros(xm.rows(), cols);
        let mut inv_scale = Vec::with_capacity(xm.rows());
        let mut exact_scale = Vec::with_capacity(xm.rows());
        let mut margin = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let constant = row.iter().all(|&v| v == row[0]);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let std = var.sqrt();
            margin.push(std - LAYER_NORM_EPS);
            let exact = std >= LAYER_NORM_EPS;
            let inv = 1.0 / if exact { std } else { LAYER_NORM_EPS };
            if !constant {
                for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                    *o = (v - mean) * inv;
                }
            }
            inv_scale.push(inv);
            exact_scale.push(exact);
        }
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut out = normalized.clone();
        for r in 0..out.rows() {
            for ((o, gi), bi) in out.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.note_kinks(margin);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_scale,
                exact_scale,
            },
            ng,
        ))
    }

    /// All ordered row pairs: for `a` (n×h) and `b` (m×h), row `s·m + e` of
    /// the result is `a[s] + b[e]`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.cols() {
            return Err(NumericError::Shape {
                op: "pair_sum",
                left: am.shape(),
                right: bm.shape(),
            });
        }
        let (n, m, h) = (am.rows(), bm.rows(), am.cols());
        let mut out = Matrix::zeros(n * m, h);
        for s in 0..n {
            for e in 0..m {
                let (ra, rb) = (am.row(s), bm.row(e));
                for ((o, x), y) in out.row_mut(s * m + e).iter_mut().zip(ra).zip(rb) {
                    *o = x + y;
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::PairSum(a, b), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericError> {
        let data = self.value(a).data().to_vec();
        let v = Matrix::from_vec(rows, cols, data)?;
        let ng = self.needs(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Records a scalar `loss` of `input` together with its precomputed
    /// derivative `coeff = ∂loss/∂input`.
    pub(crate) fn reduce(&mut self, input: Var, loss: f64, coeff: Matrix) -> Var {
        debug_assert_eq!(coeff.shape(), self.value(input).shape());
        let ng = self.needs(input);
        self.push(Matrix::filled(1, 1, loss), Op::Reduce { input, coeff }, ng)
    }

    pub(crate) fn note_kink_distances(&mut self, signed: impl IntoIterator<Item = f64>) {
        self.note_kinks(signed);
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let coeff = Matrix::filled(m.rows(), m.cols(), 1.0);
        let total = m.sum();
        self.reduce(a, total, coeff)
    }

    /// Reverse sweep from the 1×1 node `loss`, accumulating parameter
    /// gradients into `store`. A tape can be swept once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<(), NumericError> {
        if self.swept {
            return Err(NumericError::BackwardTwice);
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumericError::NotScalar { shape });
        }
        self.swept = true;
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let want = |v: Var| nodes[v.0].needs_grad;
            let mut send = |v: Var, m: Matrix| accumulate(&mut grads, v, m);
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    assert_eq!(p.grad.shape(), g.shape(), "gradient shape of {}", p.name);
                    p.grad.add_assign(&g)
                }
                Op::MatMul(a, b) => {
                    if want(*a) {
                        send(*a, g.matmul_t(val(*b))?);
                    }
                    if want(*b) {
                        send(*b, val(*a).t_matmul(&g)?);
                    }
                }
                Op::MatMulT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    if want(*a) {
                        send(*a, g.matmul(val(*b))?);
                    }
                    if want(*b) {
                        send(*b, g.t_matmul(val(*a))?);
                    }
                }
                Op::Add(a, b) => {
                    if want(*a) {
                        send(*a, g.clone());
                    }
                    if want(*b) {
                        send(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if want(*a) {
                        send(*a, g.clone());
                    }
                    if want(*b) {
                        send(*b, g.scale(-1.0));
                    }
                }
                Op::AddRow(a, row) => {
                    if want(*row) {
                        let mut acc = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (s, x) in acc.row_mut(0).iter_mut().zip(g.row(r)) {
                                *s += x;
                            }
                        }
                        send(*row, acc);
                    }
                    if want(*a) {
                        send(*a, g);
                    }
                }
                Op::Hadamard(a, b) => {
                    if want(*a) {
                        send(*a, g.hadamard(val(*b))?);
                    }
                    if want(*b) {
                        send(*b, g.hadamard(val(*a))?);
                    }
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::Relu(a) => {
                    let x = val(*a);
                    send(*a, g.zip_map(x, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, g.zip_map(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv))?);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    send(*a, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normalized,
                    inv_scale,
                    exact_scale,
                } => {
                    let cols = g.cols();
                    if want(*gain) || want(*bias) {
                        let mut dg = Matrix::zeros(1, cols);
                        let mut db = Matrix::zeros(1, cols);
                        for r in 0..g.rows() {
                            for c in 0..cols {
                                dg.data_mut()[c] += g.get(r, c) * normalized.get(r, c);
                                db.data_mut()[c] += g.get(r, c);
                            }
                        }
                        if want(*gain) {
                            send(*gain, dg);
                        }
                        if want(*bias) {
                            send(*bias, db);
                        }
                    }
                    if want(*x) {
                        let gain_row = val(*gain).row(0).to_vec();
                        let mut dx = Matrix::zeros(g.rows(), cols);
                        let n = cols as f64;
                        for r in 0..g.rows() {
                            let dxhat: Vec<f64> =
                                g.row(r).iter().zip(&gain_row).map(|(a, b)| a * b).collect();
                            let xhat = normalized.row(r);
                            let mean_d = dxhat.iter().sum::<f64>() / n;
                            let mean_dx = if exact_scale[r] {
                                dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n
                            } else {
                                0.0
                            };
                            let inv = inv_scale[r];
                            for ((o, d), xh) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat) {
                                *o = inv * (d - mean_d - xh * mean_dx);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::PairSum(a, b) => {
                    let (n, m) = (val(*a).rows(), val(*b).rows());
                    let h = g.cols();
                    let mut da = Matrix::zeros(n, h);
                    let mut db = Matrix::zeros(m, h);
                    for s in 0..n {
                        for e in 0..m {
                            let gr = g.row(s * m + e);
                            for (o, v) in da.row_mut(s).iter_mut().zip(gr) {
                                *o += v;
                            }
                            for (o, v) in db.row_mut(e).iter_mut().zip(gr) {
                                *o += v;
                            }
                        }
                    }
                    if want(*a) {
                        send(*a, da);
                    }
                    if want(*b) {
                        send(*b, db);
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Matrix::from_vec(r, c, g.into_data())?);
                }
                Op::Reduce { input, coeff } => {
                    send(*input, coeff.scale(g.get(0, 0)));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, m: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&m),
        slot @ None => *slot = Some(m),
    }
}
