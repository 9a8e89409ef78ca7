//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node, including
//! the parameters pulled in through [`Tape::param`].

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Matrix),
    Gelu(Var),
    Silu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, rstd: Vec<f64> },
    Softmax(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).as_slice()[0]
    }

    /// A leaf that receives a gradient but is not tied to a parameter.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A parameter leaf. Repeated requests for the same id return the same
    /// node so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.constant(store.value(id).clone());
        self.params.insert(id, v);
        v
    }

    /// Copies `v` into a fresh leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::Shape(alloc::format!(
                "add_row: {:?} onto {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Elementwise product with a constant mask (dropout, masking).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let out = self.value(a).hadamard(&mask)?;
        Ok(self.push(out, Op::MulConst(a, mask)))
    }

    /// Tanh approximation of GELU, as used by GPT-2.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x))));
        self.push(out, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Silu(a))
    }

    /// Row-wise layer normalization with `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(Error::Shape(alloc::format!(
                "layer_norm over {cols} features with gain {:?} / bias {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g.as_slice()[c] + b.as_slice()[c]);
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// out (probability exactly zero).
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let limit = if causal { (r + 1).min(cols) } else { cols };
            let row = &av.row(r)[..limit];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (c, &v) in row.iter().enumerate() {
                let e = libm::exp(v - max);
                out.set(r, c, e);
                total += e;
            }
            for v in &mut out.row_mut(r)[..limit] {
                *v /= total;
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.push(Matrix::scalar(s), Op::SumSquares(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape(alloc::format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g.clone())?;
                }
                Op::Mul(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddRow(a, b) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *b, gb)?;
                    accumulate(&mut grads, *a, g.clone())?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s))?,
                Op::MulConst(a, mask) => accumulate(&mut grads, *a, g.hadamard(mask)?)?,
                Op::Gelu(a) => {
                    let d = self.value(*a).map(gelu_grad);
                    accumulate(&mut grads, *a, g.hadamard(&d)?)?;
                }
                Op::Silu(a) => {
                    let d = self.value(*a).map(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, g.hadamard(&d)?)?;
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (rows, cols) = xhat.shape();
                    let gv = self.value(*gamma).as_slice();
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut dxhat = vec![0.0; cols];
                        for c in 0..cols {
                            dgamma.as_mut_slice()[c] += gr[c] * hr[c];
                            dbeta.as_mut_slice()[c] += gr[c];
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dh = dot(&dxhat, hr) / cols as f64;
                        for c in 0..cols {
                            dx.set(r, c, rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh));
                        }
                    }
                    accumulate(&mut grads, *gamma, dgamma)?;
                    accumulate(&mut grads, *beta, dbeta)?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut dx = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let inner = dot(pr, gr);
                        for c in 0..p.cols() {
                            dx.set(r, c, pr[c] * (gr[c] - inner));
                        }
                    }
                    accumulate(&mut grads, *a, dx)?;
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut full = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        full.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, full)?;
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut full = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        full.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, full)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(offset, n)?)?;
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(offset, n)?)?;
                        offset += n;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, g.clone().reshape(r, c)?)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.as_slice()[0]))?;
                }
                Op::SumSquares(a) => {
                    let s = 2.0 * g.as_slice()[0];
                    accumulate(&mut grads, *a, self.value(*a).scale(s))?;
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients { grads, params: self.params.clone() })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: BTreeMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` if the loss does not depend on it.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id).and_then(|&v| self.of(v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> + '_ {
        self.params.iter().filter_map(|(&id, &v)| self.of(v).map(|g| (id, g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x`, one entry at a time.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        // small deterministic LCG so this module's tests stay self-contained
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let f = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.constant(m.clone());
            let out = build(&mut t, v);
            // weight the output so every element contributes differently
            let w = t.constant(sample(t.value(out).rows(), t.value(out).cols(), 99));
            let prod = t.mul(out, w).unwrap();
            let s = t.sum(prod);
            t.scalar_value(s)
        };
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let out = build(&mut t, v);
        let w = t.constant(sample(t.value(out).rows(), t.value(out).cols(), 99));
        let prod = t.mul(out, w).unwrap();
        let s = t.sum(prod);
        let g = t.backward(s).unwrap();
        let analytic = g.of(v).unwrap().clone();
        let numeric = numeric_grad(&x, f);
        let err = analytic.sub(&numeric).unwrap().norm() / numeric.norm().max(1e-12);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn elementwise_ops() {
        check_unary(|t, v| t.gelu(v), sample(3, 4, 1));
        check_unary(|t, v| t.silu(v), sample(3, 4, 2));
        check_unary(|t, v| t.scale(v, -2.5), sample(2, 2, 3));
        check_unary(|t, v| t.softmax_rows(v, false), sample(3, 5, 4));
        check_unary(|t, v| t.softmax_rows(v, true), sample(4, 4, 5));
    }

    #[test]
    fn structural_ops() {
        check_unary(|t, v| t.slice_rows(v, 1, 2).unwrap(), sample(4, 3, 6));
        check_unary(|t, v| t.slice_cols(v, 1, 2).unwrap(), sample(4, 3, 7));
        check_unary(|t, v| t.reshape(v, 2, 6).unwrap(), sample(4, 3, 8));
        check_unary(
            |t, v| {
                let a = t.slice_cols(v, 0, 1).unwrap();
                t.concat_cols(&[v, a, v]).unwrap()
            },
            sample(3, 3, 9),
        );
        check_unary(|t, v| t.concat_rows(&[v, v]).unwrap(), sample(2, 3, 10));
        check_unary(|t, v| t.sum_squares(v), sample(2, 3, 11));
    }

    #[test]
    fn binary_ops() {
        let b = sample(4, 3, 20);
        check_unary(|t, v| {
            let c = t.constant(b.clone());
            t.matmul(v, c).unwrap()
        }, sample(2, 4, 21));
        check_unary(|t, v| {
            let c = t.constant(b.clone());
            t.matmul(c, v).unwrap()
        }, sample(3, 2, 22));
        check_unary(|t, v| {
            let c = t.constant(b.clone());
            t.matmul_t(v, c).unwrap()
        }, sample(2, 3, 23));
        check_unary(|t, v| {
            let c = t.constant(b.clone());
            t.matmul_t(c, v).unwrap()
        }, sample(5, 3, 24));
        check_unary(|t, v| t.mul(v, v).unwrap(), sample(2, 3, 25));
        check_unary(|t, v| t.sub(v, v).unwrap(), sample(2, 3, 26));
        let row = sample(1, 3, 27);
        check_unary(|t, v| {
            let r = t.constant(row.clone());
            t.add_row(v, r).unwrap()
        }, sample(4, 3, 28));
        check_unary(|t, v| {
            let first = t.slice_rows(v, 0, 1).unwrap();
            t.add_row(v, first).unwrap()
        }, sample(4, 3, 29));
    }

    #[test]
    fn layer_norm_all_inputs() {
        let x = sample(3, 5, 30);
        let g = sample(1, 5, 31);
        let b = sample(1, 5, 32);
        check_unary(|t, v| {
            let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
            t.layer_norm(v, gv, bv).unwrap()
        }, x.clone());
        check_unary(|t, v| {
            let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
            t.layer_norm(xv, v, bv).unwrap()
        }, g.clone());
        check_unary(|t, v| {
            let (xv, gv) = (t.constant(x.clone()), t.constant(g.clone()));
            t.layer_norm(xv, gv, v).unwrap()
        }, b);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::new();
        let v = t.constant(sample(3, 3, 40));
        let p = t.softmax_rows(v, true);
        let pv = t.value(p);
        assert_eq!(pv.get(0, 1), 0.0);
        assert_eq!(pv.get(0, 2), 0.0);
        assert_eq!(pv.get(1, 2), 0.0);
        for r in 0..3 {
            assert!((pv.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Matrix::scalar(3.0), crate::params::ParamKind::Trainable, crate::params::ParamGroup::Encoder)
            .unwrap();
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        assert_eq!(a, b);
        let p = t.mul(a, b).unwrap();
        let g = t.backward(p).unwrap();
        assert_eq!(g.param(id).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let v = t.constant(Matrix::zeros(2, 2));
        assert!(t.backward(v).is_err());
    }
}
