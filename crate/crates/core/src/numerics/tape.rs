//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to the
//! owning [`Tape`]. Node ids are assigned in execution order, so walking the
//! tape backwards is a valid reverse topological order and each node is
//! visited exactly once by [`Var::backward`].

use std::cell::RefCell;

use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid, Tensor};
use crate::error::NumericsError;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    Sigmoid(usize),
    Silu(usize),
    Relu(usize),
    Abs(usize),
    Ln(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, shift: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceRows { x: usize, start: usize },
    ConcatRows(usize, usize),
    Gather { x: usize, idx: Vec<usize> },
    Sum(usize),
    Mean(usize),
    EmaScan { g: usize, alpha: usize, delta: usize },
    CosineRows { a: usize, b: usize, na: Vec<f64>, nb: Vec<f64> },
    ColMax { x: usize, argmax: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one tape node.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Adjoints produced by [`Var::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(v.shape().as_slice()),
        }
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

    /// A leaf that gradients flow into.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant (no gradient).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn rows(&self) -> usize {
        self.with_value(Tensor::rows)
    }

    pub fn cols(&self) -> usize {
        self.with_value(Tensor::cols)
    }

    pub fn item(&self) -> f64 {
        self.with_value(Tensor::item)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> (Tensor, Op)) -> Var<'t> {
        let (value, op) = self.with_value(f);
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(&self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> (Tensor, Op)) -> Var<'t> {
        self.same_tape(&other);
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn elementwise(&self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.binary(other, |a, b| {
            assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
            let v = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
            (Tensor::new(a.shape().to_vec(), v), op)
        })
    }

    /// `self[n×k] · other[k×m]`
    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            let (n, k, m) = (x.rows(), x.cols(), y.cols());
            assert_eq!(k, y.rows(), "matmul inner dimension mismatch");
            let mut out = vec![0.0; n * m];
            matmul_acc(x.values(), y.values(), &mut out, n, k, m);
            (Tensor::new(vec![n, m], out), Op::MatMul(a, b))
        })
    }

    /// `self[n×k] · other[m×k]ᵀ`
    pub fn matmul_nt(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            let (n, k, m) = (x.rows(), x.cols(), y.rows());
            assert_eq!(k, y.cols(), "matmul_nt inner dimension mismatch");
            let mut out = vec![0.0; n * m];
            matmul_nt_acc(x.values(), y.values(), &mut out, n, k, m);
            (Tensor::new(vec![n, m], out), Op::MatMulNT(a, b))
        })
    }

    /// Row-wise affine map `x · Wᵀ + b` with `W: [out×in]`, `b: [out]`.
    pub fn linear(&self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, w, b) = (&nodes[self.id].value, &nodes[weight.id].value, &nodes[bias.id].value);
            let (n, k, m) = (x.rows(), x.cols(), w.rows());
            assert_eq!(
                w.cols(),
                k,
                "linear: input dim {k} does not match weight in_dim {}",
                w.cols()
            );
            assert_eq!(b.len(), m, "linear: bias length does not match out_dim");
            let mut out = Vec::with_capacity(n * m);
            for _ in 0..n {
                out.extend_from_slice(b.values());
            }
            matmul_nt_acc(x.values(), w.values(), &mut out, n, k, m);
            Tensor::new(vec![n, m], out)
        };
        let rg = self.tape.rg(&[self.id, weight.id, bias.id]);
        self.tape.push(value, Op::Linear { x: self.id, w: weight.id, b: bias.id }, rg)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.elementwise(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.elementwise(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.elementwise(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `scale * self + shift`
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        let id = self.id;
        self.unary(|x| (x.map(|v| scale * v + shift), Op::Affine { x: id, scale }))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    /// `1 - self`
    pub fn one_minus(&self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|x| (x.map(sigmoid), Op::Sigmoid(id)))
    }

    pub fn silu(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|x| (x.map(|v| v * sigmoid(v)), Op::Silu(id)))
    }

    pub fn relu(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|x| (x.map(|v| v.max(0.0)), Op::Relu(id)))
    }

    pub fn abs(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|x| (x.map(f64::abs), Op::Abs(id)))
    }

    pub fn ln(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|x| (x.map(f64::ln), Op::Ln(id)))
    }

    /// Row-wise softmax; subtracts the row max first.
    pub fn softmax_rows(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|x| {
            let (n, m) = (x.rows(), x.cols());
            let mut out = x.values().to_vec();
            for r in 0..n {
                softmax_in_place(&mut out[r * m..(r + 1) * m]);
            }
            (Tensor::new(x.shape().to_vec(), out), Op::SoftmaxRows(id))
        })
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ x̂ + shift`.
    pub fn layer_norm(&self, gain: Var<'t>, shift: Var<'t>) -> Var<'t> {
        self.same_tape(&gain);
        self.same_tape(&shift);
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let (x, g, b) = (&nodes[self.id].value, &nodes[gain.id].value, &nodes[shift.id].value);
            let (n, d) = (x.rows(), x.cols());
            assert!(d >= 1);
            assert_eq!(g.len(), d, "layer_norm gain length mismatch");
            assert_eq!(b.len(), d, "layer_norm shift length mismatch");
            let mut out = vec![0.0; n * d];
            let mut xhat = vec![0.0; n * d];
            let mut rstd = vec![0.0; n];
            for r in 0..n {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                rstd[r] = rs;
                for c in 0..d {
                    let h = (row[c] - mean) * rs;
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * g.values()[c] + b.values()[c];
                }
            }
            (Tensor::new(x.shape().to_vec(), out), xhat, rstd)
        };
        let rg = self.tape.rg(&[self.id, gain.id, shift.id]);
        self.tape.push(
            value,
            Op::LayerNorm { x: self.id, gain: gain.id, shift: shift.id, xhat, rstd },
            rg,
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'t> {
        let id = self.id;
        self.unary(|x| {
            assert!(start <= end && end <= x.rows(), "slice_rows out of range");
            let c = x.cols();
            let v = x.values()[start * c..end * c].to_vec();
            (Tensor::new(vec![end - start, c], v), Op::SliceRows { x: id, start })
        })
    }

    /// Stacks `self` on top of `other`.
    pub fn concat_rows(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.id, other.id);
        self.binary(other, |x, y| {
            assert_eq!(x.cols(), y.cols(), "concat_rows column mismatch");
            let mut v = x.values().to_vec();
            v.extend_from_slice(y.values());
            (Tensor::new(vec![x.rows() + y.rows(), x.cols()], v), Op::ConcatRows(a, b))
        })
    }

    /// Picks flat-indexed elements into a vector.
    pub fn gather(&self, idx: &[usize]) -> Var<'t> {
        let id = self.id;
        let idx = idx.to_vec();
        self.unary(|x| {
            let v = idx.iter().map(|&i| x.values()[i]).collect();
            (Tensor::vector(v), Op::Gather { x: id, idx })
        })
    }

    pub fn sum(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|x| (Tensor::scalar(x.values().iter().sum()), Op::Sum(id)))
    }

    pub fn mean(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|x| {
            assert!(!x.is_empty(), "mean of empty tensor");
            (Tensor::scalar(x.values().iter().sum::<f64>() / x.len() as f64), Op::Mean(id))
        })
    }

    /// Damped EMA along rows: `l_i = α⊙g_i + (1 − α⊙δ)⊙l_{i−1}`, `l_0 = 0`.
    ///
    /// `self` is `g: [L×d]`; `alpha` and `delta` are `[d]`.
    pub fn ema_scan(&self, alpha: Var<'t>, delta: Var<'t>) -> Var<'t> {
        self.same_tape(&alpha);
        self.same_tape(&delta);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (g, a, dl) = (&nodes[self.id].value, &nodes[alpha.id].value, &nodes[delta.id].value);
            let (n, d) = (g.rows(), g.cols());
            assert!(n >= 1, "ema_scan on empty sequence");
            assert_eq!(a.len(), d, "alpha length mismatch");
            assert_eq!(dl.len(), d, "delta length mismatch");
            let (a, dl) = (a.values(), dl.values());
            let decay: Vec<f64> = (0..d).map(|c| 1.0 - a[c] * dl[c]).collect();
            let mut out = vec![0.0; n * d];
            for c in 0..d {
                out[c] = a[c] * g.values()[c];
            }
            for i in 1..n {
                for c in 0..d {
                    out[i * d + c] = a[c] * g.values()[i * d + c] + decay[c] * out[(i - 1) * d + c];
                }
            }
            Tensor::new(vec![n, d], out)
        };
        let rg = self.tape.rg(&[self.id, alpha.id, delta.id]);
        self.tape.push(value, Op::EmaScan { g: self.id, alpha: alpha.id, delta: delta.id }, rg)
    }

    /// Cosine similarity between every row of `self: [n×d]` and every row of
    /// `other: [m×d]`. A zero-norm row has cosine 0 with everything.
    pub fn cosine_rows(&self, other: Var<'t>) -> Var<'t> {
        let (ia, ib) = (self.id, other.id);
        self.binary(other, |a, b| {
            assert_eq!(a.cols(), b.cols(), "cosine_rows dimension mismatch");
            let (n, m) = (a.rows(), b.rows());
            let na: Vec<f64> = (0..n).map(|i| dot(a.row(i), a.row(i)).sqrt()).collect();
            let nb: Vec<f64> = (0..m).map(|j| dot(b.row(j), b.row(j)).sqrt()).collect();
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    if na[i] > 0.0 && nb[j] > 0.0 {
                        out[i * m + j] = dot(a.row(i), b.row(j)) / (na[i] * nb[j]);
                    }
                }
            }
            (Tensor::new(vec![n, m], out), Op::CosineRows { a: ia, b: ib, na, nb })
        })
    }

    /// Column-wise max over rows: `[n×d] -> [1×d]`. Ties route to the first row.
    pub fn col_max(&self) -> Var<'t> {
        let id = self.id;
        self.unary(|x| {
            let (n, d) = (x.rows(), x.cols());
            assert!(n >= 1, "col_max of empty matrix");
            let mut argmax = vec![0usize; d];
            let mut out = x.row(0).to_vec();
            for r in 1..n {
                for c in 0..d {
                    if x.get(r, c) > out[c] {
                        out[c] = x.get(r, c);
                        argmax[c] = r;
                    }
                }
            }
            (Tensor::new(vec![1, d], out), Op::ColMax { x: id, argmax })
        })
    }

    /// Reverse pass from a scalar. Adjoints accumulate over every use of a node.
    pub fn backward(&self) -> Result<Gradients, NumericsError> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if root.value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[self.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let g = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(g.values_mut());
}

fn backprop_node(nodes: &[Node], node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) {
    let go = gout.values();
    let out = node.value.values();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k, m) = (av.rows(), av.cols(), bv.cols());
            // dA = dO · Bᵀ, dB = Aᵀ · dO
            accumulate(grads, nodes, *a, |g| matmul_nt_acc(go, bv.values(), g, n, m, k));
            accumulate(grads, nodes, *b, |g| matmul_tn_acc(av.values(), go, g, n, k, m));
        }
        Op::MatMulNT(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, k, m) = (av.rows(), av.cols(), bv.rows());
            // O = A Bᵀ: dA = dO · B, dB = dOᵀ · A
            accumulate(grads, nodes, *a, |g| matmul_acc(go, bv.values(), g, n, m, k));
            accumulate(grads, nodes, *b, |g| matmul_tn_acc(go, av.values(), g, n, m, k));
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            let (n, k, m) = (xv.rows(), xv.cols(), wv.rows());
            accumulate(grads, nodes, *x, |g| matmul_acc(go, wv.values(), g, n, m, k));
            accumulate(grads, nodes, *w, |g| matmul_tn_acc(go, xv.values(), g, n, m, k));
            accumulate(grads, nodes, *b, |g| {
                for r in 0..n {
                    for (gc, &v) in g.iter_mut().zip(&go[r * m..(r + 1) * m]) {
                        *gc += v;
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |g| add_into(g, go));
            accumulate(grads, nodes, *b, |g| add_into(g, go));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |g| add_into(g, go));
            accumulate(grads, nodes, *b, |g| {
                for (gc, &v) in g.iter_mut().zip(go) {
                    *gc -= v;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.values(), nodes[*b].value.values());
            accumulate(grads, nodes, *a, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * av[i];
                }
            });
        }
        Op::Affine { x, scale } => {
            accumulate(grads, nodes, *x, |g| {
                for (gc, &v) in g.iter_mut().zip(go) {
                    *gc += scale * v;
                }
            });
        }
        Op::Sigmoid(x) => accumulate(grads, nodes, *x, |g| {
            for i in 0..g.len() {
                g[i] += go[i] * out[i] * (1.0 - out[i]);
            }
        }),
        Op::Silu(x) => {
            let xv = nodes[*x].value.values();
            accumulate(grads, nodes, *x, |g| {
                for i in 0..g.len() {
                    let s = sigmoid(xv[i]);
                    g[i] += go[i] * (s + xv[i] * s * (1.0 - s));
                }
            })
        }
        Op::Relu(x) => {
            let xv = nodes[*x].value.values();
            accumulate(grads, nodes, *x, |g| {
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        g[i] += go[i];
                    }
                }
            })
        }
        Op::Abs(x) => {
            let xv = nodes[*x].value.values();
            accumulate(grads, nodes, *x, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] * sign(xv[i]);
                }
            })
        }
        Op::Ln(x) => {
            let xv = nodes[*x].value.values();
            accumulate(grads, nodes, *x, |g| {
                for i in 0..g.len() {
                    g[i] += go[i] / xv[i];
                }
            })
        }
        Op::SoftmaxRows(x) => {
            let m = node.value.cols();
            accumulate(grads, nodes, *x, |g| {
                for r in 0..node.value.rows() {
                    let y = &out[r * m..(r + 1) * m];
                    let dy = &go[r * m..(r + 1) * m];
                    let s = dot(y, dy);
                    for c in 0..m {
                        g[r * m + c] += y[c] * (dy[c] - s);
                    }
                }
            })
        }
        Op::LayerNorm { x, gain, shift, xhat, rstd } => {
            let d = node.value.cols();
            let n = node.value.rows();
            let gv = nodes[*gain].value.values();
            accumulate(grads, nodes, *x, |g| {
                let mut dxhat = vec![0.0; d];
                for r in 0..n {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let dy = &go[r * d..(r + 1) * d];
                    for c in 0..d {
                        dxhat[c] = dy[c] * gv[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxhat, xh) / d as f64;
                    for c in 0..d {
                        g[r * d + c] += rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
                    }
                }
            });
            accumulate(grads, nodes, *gain, |g| {
                for r in 0..n {
                    for c in 0..d {
                        g[c] += go[r * d + c] * xhat[r * d + c];
                    }
                }
            });
            accumulate(grads, nodes, *shift, |g| {
                for r in 0..n {
                    for c in 0..d {
                        g[c] += go[r * d + c];
                    }
                }
            });
        }
        Op::SliceRows { x, start } => {
            let c = node.value.cols();
            accumulate(grads, nodes, *x, |g| {
                add_into(&mut g[start * c..start * c + go.len()], go);
            });
        }
        Op::ConcatRows(a, b) => {
            let split = nodes[*a].value.len();
            accumulate(grads, nodes, *a, |g| add_into(g, &go[..split]));
            accumulate(grads, nodes, *b, |g| add_into(g, &go[split..]));
        }
        Op::Gather { x, idx } => accumulate(grads, nodes, *x, |g| {
            for (k, &i) in idx.iter().enumerate() {
                g[i] += go[k];
            }
        }),
        Op::Sum(x) => accumulate(grads, nodes, *x, |g| {
            for gc in g.iter_mut() {
                *gc += go[0];
            }
        }),
        Op::Mean(x) => accumulate(grads, nodes, *x, |g| {
            let s = go[0] / g.len() as f64;
            for gc in g.iter_mut() {
                *gc += s;
            }
        }),
        Op::EmaScan { g: gi, alpha, delta } => {
            let gv = nodes[*gi].value.values();
            let av = nodes[*alpha].value.values();
            let dv = nodes[*delta].value.values();
            let (n, d) = (node.value.rows(), node.value.cols());
            // adjoint of l_i including the carry from l_{i+1}
            let mut lam = vec![0.0; n * d];
            for c in 0..d {
                let decay = 1.0 - av[c] * dv[c];
                let mut carry = 0.0;
                for i in (0..n).rev() {
                    carry = go[i * d + c] + decay * carry;
                    lam[i * d + c] = carry;
                }
            }
            accumulate(grads, nodes, *gi, |g| {
                for i in 0..n {
                    for c in 0..d {
                        g[i * d + c] += av[c] * lam[i * d + c];
                    }
                }
            });
            accumulate(grads, nodes, *alpha, |g| {
                for i in 0..n {
                    for c in 0..d {
                        let prev = if i > 0 { out[(i - 1) * d + c] } else { 0.0 };
                        g[c] += lam[i * d + c] * (gv[i * d + c] - dv[c] * prev);
                    }
                }
            });
            accumulate(grads, nodes, *delta, |g| {
                for i in 1..n {
                    for c in 0..d {
                        g[c] -= lam[i * d + c] * av[c] * out[(i - 1) * d + c];
                    }
                }
            });
        }
        Op::CosineRows { a, b, na, nb } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (n, m, d) = (av.rows(), bv.rows(), av.cols());
            accumulate(grads, nodes, *a, |g| {
                for i in 0..n {
                    if na[i] == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        if nb[j] == 0.0 {
                            continue;
                        }
                        let w = go[i * m + j];
                        let cos = out[i * m + j];
                        for c in 0..d {
                            g[i * d + c] += w
                                * (bv.get(j, c) / (na[i] * nb[j]) - cos * av.get(i, c) / (na[i] * na[i]));
                        }
                    }
                }
            });
            accumulate(grads, nodes, *b, |g| {
                for j in 0..m {
                    if nb[j] == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        if na[i] == 0.0 {
                            continue;
                        }
                        let w = go[i * m + j];
                        let cos = out[i * m + j];
                        for c in 0..d {
                            g[j * d + c] += w
                                * (av.get(i, c) / (na[i] * nb[j]) - cos * bv.get(j, c) / (nb[j] * nb[j]));
                        }
                    }
                }
            });
        }
        Op::ColMax { x, argmax } => {
            let d = node.value.cols();
            accumulate(grads, nodes, *x, |g| {
                for (c, &r) in argmax.iter().enumerate() {
                    g[r * d + c] += go[c];
                }
            });
        }
    }
}

fn add_into(g: &mut [f64], v: &[f64]) {
    for (gc, &x) in g.iter_mut().zip(v) {
        *gc += x;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
