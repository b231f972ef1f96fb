//! Recorded computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] lives for one forward pass. Parameters enter as leaves bound to
//! a [`ParamSet`] slot; [`Graph::backward`] returns one gradient per slot.

use std::collections::HashMap;

use super::layers::{ParamId, ParamSet};
use super::tensor::{mm, mm_nt, mm_tn, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    RowSum(Var),
    SumAll(Var),
    LogSoftmax(Var),
    RepeatRows(Var, usize),
    Reshape(Var),
    BroadcastRows(Var),
    TakeRows(Var, Vec<usize>),
    BiNormal(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients aligned with the slots of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            tensors: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// Constant input; receives no gradient outside the graph.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Leaf bound to a parameter slot. Repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id.0) {
            return v;
        }
        let v = self.push(Op::Leaf, params.get(id).clone());
        self.bound.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = mm(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert!(
            x.same_shape(y),
            "elementwise shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        );
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q));
        Tensor::matrix(x.rows(), x.cols(), data.collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p + q);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p - q);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |p, q| p * q);
        self.push(Op::Mul(a, b), out)
    }

    /// `x[m,n] + row[1,n]` on every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert!(rv.rows() == 1 && rv.cols() == xv.cols(), "add_row shape");
        let n = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv.data()[i % n])
            .collect();
        let out = Tensor::matrix(xv.rows(), n, data);
        self.push(Op::AddRow(x, row), out)
    }

    /// `x[m,n] * col[m,1]` scaling every row.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert!(cv.cols() == 1 && cv.rows() == xv.rows(), "mul_col shape");
        let n = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * cv.data()[i / n])
            .collect();
        let out = Tensor::matrix(xv.rows(), n, data);
        self.push(Op::MulCol(x, col), out)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine(x, scale), out)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), m, "concat rows");
                self.value(p).cols()
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::matrix(m, n, data))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        assert!(start + width <= xv.cols(), "slice_cols range");
        let mut data = Vec::with_capacity(xv.rows() * width);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let out = Tensor::matrix(xv.rows(), width, data);
        self.push(Op::Slice(x, start), out)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().sum()).collect();
        let out = Tensor::matrix(xv.rows(), 1, data);
        self.push(Op::RowSum(x), out)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            data.extend(log_softmax(xv.row(r)));
        }
        let out = Tensor::matrix(xv.rows(), xv.cols(), data);
        self.push(Op::LogSoftmax(x), out)
    }

    /// Each row repeated `k` times consecutively: `[m,n] -> [m*k,n]`.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len() * k);
        for r in 0..xv.rows() {
            for _ in 0..k {
                data.extend_from_slice(xv.row(r));
            }
        }
        let out = Tensor::matrix(xv.rows() * k, xv.cols(), data);
        self.push(Op::RepeatRows(x, k), out)
    }

    /// Row-major reinterpretation with the same number of values.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape size");
        let out = Tensor::matrix(rows, cols, xv.data().to_vec());
        self.push(Op::Reshape(x), out)
    }

    /// A `[1,n]` row copied to `m` rows.
    pub fn broadcast_rows(&mut self, x: Var, m: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows(), 1, "broadcast_rows expects one row");
        let mut data = Vec::with_capacity(m * xv.cols());
        for _ in 0..m {
            data.extend_from_slice(xv.data());
        }
        let out = Tensor::matrix(m, xv.cols(), data);
        self.push(Op::BroadcastRows(x), out)
    }

    /// Gather rows by index; repeats allowed.
    pub fn take_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * xv.cols());
        for &r in idx {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::matrix(idx.len(), xv.cols(), data);
        self.push(Op::TakeRows(x, idx.to_vec()), out)
    }

    /// Row-wise bivariate normal log-density. `params` rows hold
    /// `(mu_x, mu_y, log_sx, log_sy, r)` with correlation `tanh(r)`;
    /// `target` is a constant `[m,2]`.
    pub fn binormal_logpdf(&mut self, params: Var, target: Tensor) -> Var {
        let pv = self.value(params);
        assert!(pv.cols() == 5 && target.cols() == 2 && target.rows() == pv.rows());
        let data = (0..pv.rows())
            .map(|i| {
                let p = pv.row(i);
                let t = target.row(i);
                binormal_terms(p, [t[0], t[1]]).logp
            })
            .collect();
        let out = Tensor::matrix(pv.rows(), 1, data);
        self.push(Op::BiNormal(params, target), out)
    }

    /// Gradients of the scalar `loss` for every bound parameter.
    pub fn backward(&self, loss: Var, params: &ParamSet) -> Gradients {
        let grads = self.backward_all(loss);
        let mut out = Gradients::zeros_like(params);
        for (&slot, &v) in &self.bound {
            if let Some(g) = &grads[v.0] {
                out.tensors[slot] = g.clone();
            }
        }
        out
    }

    /// Gradient with respect to an arbitrary node, zero if unreachable.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Tensor {
        let grads = self.backward_all(loss);
        let (r, c) = self.shape(wrt);
        grads[wrt.0].clone().unwrap_or_else(|| Tensor::zeros(r, c))
    }

    fn backward_all(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, d: Tensor| match &mut grads[v.0] {
            Some(t) => t.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        let elementwise = |a: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            let data = g.data().iter().enumerate().map(|(i, &gv)| f(i, gv)).collect();
            Tensor::matrix(a.rows(), a.cols(), data)
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, mm_nt(g, self.value(*b)));
                acc(*b, mm_tn(self.value(*a), g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, elementwise(av, &|i, gv| gv * bv.data()[i]));
                acc(*b, elementwise(bv, &|i, gv| gv * av.data()[i]));
            }
            Op::AddRow(x, row) => {
                acc(*x, g.clone());
                let n = g.cols();
                let mut s = vec![0.0; n];
                for r in 0..g.rows() {
                    for (o, v) in s.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*row, Tensor::matrix(1, n, s));
            }
            Op::MulCol(x, col) => {
                let (xv, cv) = (self.value(*x), self.value(*col));
                let n = xv.cols();
                acc(*x, elementwise(xv, &|i, gv| gv * cv.data()[i / n]));
                let data = (0..xv.rows())
                    .map(|r| xv.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                    .collect();
                acc(*col, Tensor::matrix(xv.rows(), 1, data));
            }
            Op::Affine(x, scale) => acc(*x, g.map(|v| v * scale)),
            Op::Tanh(x) => {
                let y = out.data();
                acc(*x, elementwise(out, &|i, gv| gv * (1.0 - y[i] * y[i])));
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                acc(*x, elementwise(out, &|i, gv| gv * y[i] * (1.0 - y[i])));
            }
            Op::Exp(x) => {
                let y = out.data();
                acc(*x, elementwise(out, &|i, gv| gv * y[i]));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut data = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        data.extend_from_slice(&g.row(r)[start..start + w]);
                    }
                    acc(p, Tensor::matrix(g.rows(), w, data));
                    start += w;
                }
            }
            Op::Slice(x, start) => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.rows(), xv.cols());
                let (n, w) = (xv.cols(), g.cols());
                for r in 0..g.rows() {
                    d.data_mut()[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let data = (0..xv.len()).map(|i| g.data()[i / n]).collect();
                acc(*x, Tensor::matrix(xv.rows(), n, data));
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::LogSoftmax(x) => {
                let n = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for r in 0..out.rows() {
                    let gs: f64 = g.row(r).iter().sum();
                    for c in 0..n {
                        data.push(g.get(r, c) - out.get(r, c).exp() * gs);
                    }
                }
                acc(*x, Tensor::matrix(out.rows(), n, data));
            }
            Op::RepeatRows(x, k) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for r in 0..g.rows() {
                    let dst = &mut d[(r / k) * n..(r / k + 1) * n];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::matrix(xv.rows(), n, d));
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::matrix(xv.rows(), xv.cols(), g.data().to_vec()));
            }
            Op::BroadcastRows(x) => {
                let n = g.cols();
                let mut s = vec![0.0; n];
                for r in 0..g.rows() {
                    for (o, v) in s.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::matrix(1, n, s));
            }
            Op::TakeRows(x, idx) => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in d[src * n..(src + 1) * n].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, Tensor::matrix(xv.rows(), n, d));
            }
            Op::BiNormal(params, target) => {
                let pv = self.value(*params);
                let mut data = Vec::with_capacity(pv.len());
                for i in 0..pv.rows() {
                    let t = target.row(i);
                    let terms = binormal_terms(pv.row(i), [t[0], t[1]]);
                    let gi = g.data()[i];
                    data.extend(terms.grad.iter().map(|d| d * gi));
                }
                acc(*params, Tensor::matrix(pv.rows(), 5, data));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub(crate) struct BiNormalTerms {
    pub logp: f64,
    pub grad: [f64; 5],
}

/// `log(cosh(r)^2)` without overflow for large `|r|`.
fn log_cosh_sq(r: f64) -> f64 {
    let a = r.abs();
    2.0 * (a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2)
}

pub(crate) fn binormal_terms(p: &[f64], y: [f64; 2]) -> BiNormalTerms {
    let (lsx, lsy, r) = (p[2], p[3], p[4]);
    let (sx, sy) = (lsx.exp(), lsy.exp());
    let rho = r.tanh();
    let a = (y[0] - p[0]) / sx;
    let b = (y[1] - p[1]) / sy;
    let q = a * a - 2.0 * rho * a * b + b * b;
    // 1 / (1 - rho^2) = cosh(r)^2
    let w = {
        let c = r.cosh();
        c * c
    };
    let logp = -(2.0 * std::f64::consts::PI).ln() - lsx - lsy + 0.5 * log_cosh_sq(r) - 0.5 * w * q;
    let grad = [
        w * (a - rho * b) / sx,
        w * (b - rho * a) / sy,
        -1.0 + w * (a * a - rho * a * b),
        -1.0 + w * (b * b - rho * a * b),
        rho - rho * w * q + a * b,
    ];
    BiNormalTerms { logp, grad }
}
