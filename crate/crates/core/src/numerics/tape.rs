//! Minimal reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. Leaves created with
//! `requires_grad = false` are constants: gradients never flow into them,
//! which is how detached inputs and frozen parameter groups are expressed.

use super::matrix::Matrix;
use super::ops;
use crate::{DfaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulNt(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    NormalizeRows(Var, Vec<f64>),
    SoftmaxRows(Var),
    /// Scalar output with an eagerly computed local gradient.
    Scalar(Var, Matrix),
    /// Forward value supplied externally; gradient passes straight through.
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape node that needs them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed in.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

/// Row norms below this are clamped so zero rows stay finite.
const NORM_FLOOR: f64 = 1e-12;

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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNt(a, b), rg))
    }

    /// Adds a `1 × cols` bias to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(DfaError::shape(
                "add_row_bias",
                format!("bias {:?} for input {:?}", bv.shape(), xv.shape()),
            ));
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.needs(x);
        self.push(value, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.needs(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.needs(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// `[a, b]` column-wise.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hconcat(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(DfaError::shape(
                "slice_cols",
                format!("{start}..{end} of {} columns", xv.cols()),
            ));
        }
        let mut value = Matrix::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        let rg = self.needs(x);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::vstack(&mats)?;
        let rg = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::StackRows(parts.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(DfaError::shape(
                "gather_rows",
                format!("row {bad} of {}", xv.rows()),
            ));
        }
        let value = xv.select_rows(indices);
        let rg = self.needs(x);
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), rg))
    }

    /// Projects every row onto the unit sphere.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let norm = xv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let norm = norm.max(NORM_FLOOR);
            for v in value.row_mut(r) {
                *v /= norm;
            }
            norms.push(norm);
        }
        let rg = self.needs(x);
        self.push(value, Op::NormalizeRows(x, norms), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = ops::softmax_rows(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Records a scalar `value` computed from `input` together with its
    /// gradient `d value / d input`.
    pub fn scalar(&mut self, input: Var, value: f64, local_grad: Matrix) -> Result<Var> {
        self.value(input)
            .check_same_shape(&local_grad, "Tape::scalar")?;
        let rg = self.needs(input);
        Ok(self.push(Matrix::scalar(value), Op::Scalar(input, local_grad), rg))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, grad) = ops::cross_entropy(self.value(logits), labels)?;
        self.scalar(logits, loss, grad)
    }

    pub fn mse_uniform(&mut self, probs: Var, k: usize) -> Result<Var> {
        let (loss, grad) = ops::mse_uniform(self.value(probs), k)?;
        self.scalar(probs, loss, grad)
    }

    /// Forward value `value`, identity gradient into `x`.
    pub fn straight_through(&mut self, x: Var, value: Matrix) -> Result<Var> {
        self.value(x)
            .check_same_shape(&value, "straight_through")?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::StraightThrough(x), rg))
    }

    /// Reverse sweep from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(DfaError::shape(
                "backward",
                format!("loss has shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, g.column_sums());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Affine(x, scale) => self.accumulate(grads, *x, g.scale(*scale)),
            Op::Tanh(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(a, b) => {
                let left = self.value(*a).cols();
                let (mut ga, mut gb) = (
                    Matrix::zeros(g.rows(), left),
                    Matrix::zeros(g.rows(), g.cols() - left),
                );
                for r in 0..g.rows() {
                    let (l, rt) = g.row(r).split_at(left);
                    ga.row_mut(r).copy_from_slice(l);
                    gb.row_mut(r).copy_from_slice(rt);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::SliceCols(x, start) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        self.accumulate(grads, p, g.select_rows(&idx));
                    }
                    offset += rows;
                }
            }
            Op::GatherRows(x, indices) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, &src) in indices.iter().enumerate() {
                        for (o, v) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::NormalizeRows(x, norms) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let clamped = norms[r] <= NORM_FLOOR;
                    let proj = if clamped { 0.0 } else { super::matrix::dot(yr, gr) };
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * proj) / norms[r];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = super::matrix::dot(yr, gr);
                    for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Scalar(x, local) => self.accumulate(grads, *x, local.scale(g.item())),
            Op::StraightThrough(x) => self.accumulate(grads, *x, g.clone()),
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::rng::SeededRng;

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        let v = (0..rows * cols).map(|_| rng.normal()).collect();
        Matrix::from_vec(rows, cols, v).unwrap()
    }

    /// Every primitive in one scalar so a single check covers all backward rules.
    fn composite(params: &[Matrix]) -> crate::Result<(f64, Vec<Matrix>)> {
        let mut t = Tape::new();
        let x = t.param(params[0].clone());
        let w = t.param(params[1].clone());
        let b = t.param(params[2].clone());
        let h = t.matmul_nt(x, w)?;
        let h = t.add_row_bias(h, b)?;
        let a = t.tanh(h);
        let s = t.sigmoid(h);
        let m = t.mul(a, s)?;
        let m = t.affine(m, 1.5, 0.2);
        let c = t.concat_cols(m, a)?;
        let sl = t.slice_cols(c, 1, 5)?;
        let st = t.stack_rows(&[sl, sl])?;
        let ga = t.gather_rows(st, &[0, 3, 3, 1])?;
        let nr = t.normalize_rows(ga);
        let sm = t.softmax_rows(nr)?;
        let d = t.sub(sm, nr)?;
        let e = t.add(d, sm)?;
        let ce = t.cross_entropy(e, &[0, 1, 2, 3])?;
        let mse = t.mse_uniform(sm, 4)?;
        let loss = t.add(ce, mse)?;
        let grads = t.backward(loss)?;
        Ok((
            t.value(loss).item(),
            vec![
                grads.get_or_zeros(x, params[0].shape()),
                grads.get_or_zeros(w, params[1].shape()),
                grads.get_or_zeros(b, params[2].shape()),
            ],
        ))
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let params = vec![random(3, 4, &mut rng), random(5, 4, &mut rng), random(1, 5, &mut rng)];
            let err = grad_check(&params, 1e-5, composite).unwrap();
            assert!(err < 1e-7, "seed {seed}: {err}");
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::filled(1, 2, 1.0));
        let b = t.param(Matrix::filled(1, 2, 2.0));
        let m = t.mul(a, b).unwrap();
        let loss = t.mse_uniform(m, 2).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::row_vector(vec![0.2, 0.7]));
        let y = t.straight_through(x, Matrix::row_vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(t.value(y).as_slice(), &[0.0, 1.0]);
        let s = t.scale(y, 3.0);
        let loss = t.mse_uniform(s, 2).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(x).unwrap().frobenius_norm() > 0.0);
    }
}
