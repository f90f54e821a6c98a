//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar (1×1) node walks the tape in reverse and
//! returns the adjoint of every node. Structured losses (the CRF objectives)
//! enter as [`Tape::scalar_loss`] nodes carrying their own local gradients.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{sigmoid, Mask, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    MaskSelect {
        on_self: Var,
        on_other: Var,
        masks: Rc<(Mask, Mask)>,
    },
    MaskedSoftmax(Var),
    Dropout(Var, Rc<Vec<f64>>),
    ScalarLoss(Vec<(Var, Matrix)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`]; `None` for nodes the loss does not depend on.
#[derive(Debug)]
pub struct Grads(Vec<Option<Matrix>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; with `b` an `out × in` weight this is a linear layer.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds the `1 × n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "add_row expects a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), b.cols(), "add_row width");
        for r in 0..value.rows() {
            for (v, &bb) in value.row_mut(r).iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.push(value, Op::AddRow(a, bias))
    }

    /// `x · Wᵀ + b` for a weight stored `out × in` and a `1 × out` bias.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let y = self.matmul_t(x, weight);
        match bias {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data).expect("shape");
        self.push(value, Op::Mul(a, b))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine_scalar(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| scale * v + shift);
        self.push(value, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine_scalar(a, factor, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row count");
                value.row_mut(r)[offset..offset + src.cols()].copy_from_slice(src.row(r));
                offset += src.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(src.rows(), end - start);
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..end]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, r + 1)
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "stack_rows width");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let value = Matrix::from_vec(rows, cols, data).expect("shape");
        self.push(value, Op::StackRows(parts.to_vec()))
    }

    /// Per-row layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = normalized.clone();
        for r in 0..rows {
            for ((v, gg), bb) in value.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *v = *v * gg + bb;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        )
    }

    /// `on_self` where the first mask holds, `on_other` where the second holds, 0 elsewhere.
    pub fn mask_select(&mut self, on_self: Var, on_other: Var, masks: Rc<(Mask, Mask)>) -> Var {
        let (a, b) = (self.value(on_self), self.value(on_other));
        let mut value = Matrix::zeros(a.rows(), a.cols());
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                if masks.0.get(r, c) {
                    value[(r, c)] = a[(r, c)];
                } else if masks.1.get(r, c) {
                    value[(r, c)] = b[(r, c)];
                }
            }
        }
        self.push(
            value,
            Op::MaskSelect {
                on_self,
                on_other,
                masks,
            },
        )
    }

    /// Row softmax over allowed entries. Panics on a fully masked row.
    pub fn masked_softmax(&mut self, scores: Var, allow: Rc<Mask>) -> Var {
        let value = crate::numerics::softmax_masked(self.value(scores), &allow)
            .expect("masked_softmax: every row needs an allowed entry");
        self.push(value, Op::MaskedSoftmax(scores))
    }

    /// Multiplies by a fixed scaling mask (already divided by the keep probability).
    pub fn dropout(&mut self, a: Var, keep_scale: Rc<Vec<f64>>) -> Var {
        let src = self.value(a);
        assert_eq!(src.data().len(), keep_scale.len(), "dropout mask size");
        let data = src.data().iter().zip(keep_scale.iter()).map(|(v, k)| v * k).collect();
        let value = Matrix::from_vec(src.rows(), src.cols(), data).expect("shape");
        self.push(value, Op::Dropout(a, keep_scale))
    }

    /// A scalar node whose local gradient with respect to each input is known.
    pub fn scalar_loss(&mut self, value: f64, local_grads: Vec<(Var, Matrix)>) -> Var {
        for (v, g) in &local_grads {
            assert_eq!(self.value(*v).shape(), g.shape(), "scalar_loss gradient shape");
        }
        self.push(Matrix::filled(1, 1, value), Op::ScalarLoss(local_grads))
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Matrix>], v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.matmul_t(self.value(*b)));
                acc(grads, *b, self.value(*a).t_matmul(g));
            }
            Op::MatMulT(a, b) => {
                acc(grads, *a, g.matmul(self.value(*b)));
                acc(grads, *b, g.t_matmul(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, g.clone());
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(grads, *bias, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(grads, *a, zip_map(g, vb, |x, y| x * y));
                acc(grads, *b, zip_map(g, va, |x, y| x * y));
            }
            Op::Affine(a, scale) => acc(grads, *a, g.map(|v| v * scale)),
            Op::Sigmoid(a) => acc(grads, *a, zip_map(g, &node.value, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => acc(grads, *a, zip_map(g, &node.value, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(
                grads,
                *a,
                zip_map(g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    let mut d = Matrix::zeros(g.rows(), width);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + width]);
                    }
                    acc(grads, p, d);
                    offset += width;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(grads, *a, d);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    acc(grads, p, g.slice_rows(offset, offset + n));
                    offset += n;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let (rows, cols) = g.shape();
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                let n = cols as f64;
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = normalized.row(r);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..cols {
                        dgain.data_mut()[c] += gr[c] * xh[c];
                        dbias.data_mut()[c] += gr[c];
                        let d = gr[c] * gv.data()[c];
                        sum_d += d;
                        sum_dx += d * xh[c];
                    }
                    for c in 0..cols {
                        let d = gr[c] * gv.data()[c];
                        dx[(r, c)] = inv_std[r] * (d - sum_d / n - xh[c] * sum_dx / n);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::MaskSelect {
                on_self,
                on_other,
                masks,
            } => {
                let mut ds = Matrix::zeros(g.rows(), g.cols());
                let mut d_o = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        if masks.0.get(r, c) {
                            ds[(r, c)] = g[(r, c)];
                        } else if masks.1.get(r, c) {
                            d_o[(r, c)] = g[(r, c)];
                        }
                    }
                }
                acc(grads, *on_self, ds);
                acc(grads, *on_other, d_o);
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let inner: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..g.cols() {
                        d[(r, c)] = y[(r, c)] * (g[(r, c)] - inner);
                    }
                }
                acc(grads, *a, d);
            }
            Op::Dropout(a, keep) => {
                let data = g.data().iter().zip(keep.iter()).map(|(x, k)| x * k).collect();
                acc(grads, *a, Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            Op::ScalarLoss(locals) => {
                let up = g[(0, 0)];
                for (v, local) in locals {
                    acc(grads, *v, local.map(|x| x * up));
                }
            }
        }
    }
}

/// Inverted dropout with its own seeded stream. A rate of 0 records nothing.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).data().len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.dropout(x, Rc::new(mask))
    }
}

/// Applies `dropout` when present.
pub fn maybe_dropout(dropout: &mut Option<&mut Dropout>, tape: &mut Tape, x: Var) -> Var {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at every coordinate of `x`.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let eps = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            out.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        out
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        // small deterministic pseudo-random fill
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Sum of `weights ⊙ out` so every output coordinate matters.
    fn reduce(tape: &mut Tape, out: Var, weights: &Matrix) -> Var {
        let w = tape.leaf(weights.clone());
        let prod = tape.mul(out, w);
        let v = tape.value(prod).data().iter().sum();
        let ones = Matrix::filled(weights.rows(), weights.cols(), 1.0);
        tape.scalar_loss(v, vec![(prod, ones)])
    }

    fn check(x: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let eval = |m: &Matrix| {
            let mut tape = Tape::new();
            let v = tape.leaf(m.clone());
            let out = build(&mut tape, v);
            let w = sample(tape.value(out).rows(), tape.value(out).cols(), 99);
            let l = reduce(&mut tape, out, &w);
            tape.value(l)[(0, 0)]
        };
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = build(&mut tape, v);
        let w = sample(tape.value(out).rows(), tape.value(out).cols(), 99);
        let l = reduce(&mut tape, out, &w);
        let analytic = tape.backward(l).get_or_zeros(v, &x);
        let numeric = numeric_grad(&x, eval);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!((a - n).abs() < 1e-7 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn elementwise_ops() {
        check(sample(3, 4, 1), |t, x| t.sigmoid(x));
        check(sample(3, 4, 2), |t, x| t.tanh(x));
        check(sample(3, 4, 3), |t, x| t.relu(x));
        check(sample(3, 4, 4), |t, x| t.affine_scalar(x, -1.0, 1.0));
        check(sample(3, 4, 5), |t, x| t.mul(x, x));
    }

    #[test]
    fn products_and_shapes() {
        let w = sample(5, 4, 7);
        check(sample(3, 4, 6), |t, x| {
            let wv = t.leaf(w.clone());
            t.matmul_t(x, wv)
        });
        check(sample(4, 5, 8), |t, x| {
            let a = t.leaf(sample(3, 4, 9));
            t.matmul(a, x)
        });
        check(sample(3, 4, 10), |t, x| {
            let a = t.slice_cols(x, 1, 3);
            let b = t.row(x, 2);
            let c = t.concat_cols(&[a, x]);
            let d = t.stack_rows(&[b, x]);
            let e = t.slice_rows(d, 1, 4);
            let f = t.slice_cols(c, 2, 6);
            t.add(e, f)
        });
        check(sample(1, 4, 11), |t, b| {
            let x = t.leaf(sample(3, 4, 12));
            t.add_row(x, b)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let g = sample(1, 5, 13);
        let b = sample(1, 5, 14);
        check(sample(3, 5, 15), |t, x| {
            let gv = t.leaf(g.clone());
            let bv = t.leaf(b.clone());
            t.layer_norm(x, gv, bv, 1e-5)
        });
        check(sample(1, 5, 16), |t, gain| {
            let x = t.leaf(sample(3, 5, 17));
            let bv = t.leaf(b.clone());
            t.layer_norm(x, gain, bv, 1e-5)
        });
    }

    #[test]
    fn masked_attention_gradients() {
        let ms = Mask::from_fn(3, 3, |r, c| c <= r && (r + c) % 2 == 0);
        let mo = Mask::from_fn(3, 3, |r, c| c < r && (r + c) % 2 == 1);
        let masks = Rc::new((ms.clone(), mo.clone()));
        let allow = Rc::new(ms.union(&mo));
        let other = sample(3, 3, 18);
        check(sample(3, 3, 19), |t, x| {
            let o = t.leaf(other.clone());
            let s = t.mask_select(x, o, masks.clone());
            t.masked_softmax(s, allow.clone())
        });
    }

    #[test]
    fn dropout_scales_gradient() {
        let keep = Rc::new(vec![2.0, 0.0, 2.0, 0.0, 2.0, 2.0]);
        check(sample(2, 3, 20), |t, x| t.dropout(x, keep.clone()));
    }
}
