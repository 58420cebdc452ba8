//! Reverse-mode automatic differentiation on a tape of tensor operations.
//!
//! The tape is define-by-run: each operation computes its value eagerly and
//! records what it needs for the backward sweep. Handles ([`Var`]) are plain
//! indices, so graph-building code reads like ordinary arithmetic:
//!
//! ```
//! use numcore::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf_grad(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
//! let y = tape.sum(tape.mul(x, x));
//! let g = tape.grad(y, &[x]).unwrap();
//! assert_eq!(g[0].as_slice(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Values are checked for NaN/Inf as they are produced; the first offending
//! operation poisons the tape and [`Tape::grad`] reports it by name.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::NumError;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sentinel gather index that reads as zero and routes no gradient.
pub(crate) const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    /// `a[m,n] + row[n]` broadcast over rows.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Matmul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    Gelu(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    AddN(Vec<usize>),
    /// Column means: `[m,n] -> [1,n]`.
    MeanRows(usize),
    ConcatRows(usize, usize),
    SliceRows {
        input: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(usize, usize),
    Gather {
        input: usize,
        indices: Arc<Vec<usize>>,
    },
    LayerNormRows {
        input: usize,
        gamma: usize,
        beta: usize,
        normalized: Tensor<T>,
        inv_std: Vec<T>,
    },
    /// Cross-entropy of a `[1,V]` logits row against one label id.
    CrossEntropyLogits {
        logits: usize,
        label: usize,
        probs: Tensor<T>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::AddN(..) => "add_n",
            Op::MeanRows(..) => "mean_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Gather { .. } => "gather",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape. Interior mutability keeps graph-building call sites free
/// of `&mut` plumbing; a tape is not `Sync` and belongs to one job.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    poison: RefCell<Option<&'static str>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            poison: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First operation that produced a non-finite value, if any.
    pub fn poisoned_op(&self) -> Option<&'static str> {
        *self.poison.borrow()
    }

    /// Value of a node (cheap: storage is shared).
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if !value.all_finite() {
            let mut poison = self.poison.borrow_mut();
            if poison.is_none() {
                *poison = Some(op.name());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Constant input: participates in forward values only.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn leaf_grad(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant_scalar(&self, v: T) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(&self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a.0, b.0), self.needs(a) || self.needs(b))
    }

    /// Adds a rank-1 row vector to every row of a rank-2 matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.shape().len(), 1, "add_row: row must be rank-1");
        let (m, n) = (av.rows(), av.cols());
        assert_eq!(rv.len(), n, "add_row: row length {} != cols {}", rv.len(), n);
        let mut data = Vec::with_capacity(m * n);
        let (ad, rd) = (av.as_slice(), rv.as_slice());
        for i in 0..m {
            for j in 0..n {
                data.push(ad[i * n + j] + rd[j]);
            }
        }
        self.push(
            Tensor::new(vec![m, n], data),
            Op::AddRow(a.0, row.0),
            self.needs(a) || self.needs(row),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(&self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(&self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn scale(&self, a: Var, k: T) -> Var {
        let value = self.value(a).map(|x| x * k);
        self.push(value, Op::Scale(a.0, k), self.needs(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let value = matmul_raw(&av, &bv, m, k, n);
        self.push(value, Op::Matmul(a.0, b.0), self.needs(a) || self.needs(b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let ad = av.as_slice();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ad[i * n + j];
            }
        }
        self.push(
            Tensor::new(vec![n, m], data),
            Op::Transpose(a.0),
            self.needs(a),
        )
    }

    /// Row-wise softmax of a rank-2 tensor (max-subtracted for stability).
    pub fn softmax_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let ad = av.as_slice();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                data[i * n + j] = data[i * n + j] / denom;
            }
        }
        self.push(
            Tensor::new(vec![m, n], data),
            Op::SoftmaxRows(a.0),
            self.needs(a),
        )
    }

    pub fn gelu(&self, a: Var) -> Var {
        let value = self.value(a).map(gelu_fwd);
        self.push(value, Op::Gelu(a.0), self.needs(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(a.0), self.needs(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self
            .value(a)
            .as_slice()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum(a.0), self.needs(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let av = self.value(a);
        let n = T::from_f64(av.len() as f64);
        let total = av.as_slice().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total / n), Op::Mean(a.0), self.needs(a))
    }

    /// Sum of same-shaped vars, accumulated in argument order. Callers that
    /// need bit-stable results across input permutations sort first.
    pub fn add_n(&self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "add_n on empty list");
        let first = self.value(vars[0]);
        let mut acc = first.as_slice().to_vec();
        let mut needs = self.needs(vars[0]);
        for &v in &vars[1..] {
            let t = self.value(v);
            assert_eq!(t.shape(), first.shape(), "add_n shape mismatch");
            for (a, &b) in acc.iter_mut().zip(t.as_slice()) {
                *a += b;
            }
            needs |= self.needs(v);
        }
        self.push(
            Tensor::new(first.shape().to_vec(), acc),
            Op::AddN(vars.iter().map(|v| v.0).collect()),
            needs,
        )
    }

    /// Column means over rows: `[m,n] -> [1,n]`.
    pub fn mean_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let ad = av.as_slice();
        let inv = T::from_f64(1.0 / m as f64);
        let mut data = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                data[j] += ad[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        self.push(
            Tensor::new(vec![1, n], data),
            Op::MeanRows(a.0),
            self.needs(a),
        )
    }

    pub fn concat_rows(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols(), "concat_rows column mismatch");
        let mut data = av.as_slice().to_vec();
        data.extend_from_slice(bv.as_slice());
        self.push(
            Tensor::new(vec![av.rows() + bv.rows(), av.cols()], data),
            Op::ConcatRows(a.0, b.0),
            self.needs(a) || self.needs(b),
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        assert!(start + len <= m, "slice_rows out of range");
        let data = av.as_slice()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::new(vec![len, n], data),
            Op::SliceRows {
                input: a.0,
                start,
                len,
            },
            self.needs(a),
        )
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let m = av.rows();
        assert_eq!(m, bv.rows(), "concat_cols row mismatch");
        let (p, q) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&av.as_slice()[i * p..(i + 1) * p]);
            data.extend_from_slice(&bv.as_slice()[i * q..(i + 1) * q]);
        }
        self.push(
            Tensor::new(vec![m, p + q], data),
            Op::ConcatCols(a.0, b.0),
            self.needs(a) || self.needs(b),
        )
    }

    /// Arbitrary re-indexing of the flattened input:
    /// `out.flat[i] = in.flat[indices[i]]`, with `usize::MAX` reading as zero.
    /// Backward scatter-adds, so this one op covers patch extraction,
    /// embedding lookup, and the resize-pad input transform.
    pub fn gather(&self, a: Var, indices: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Var {
        let av = self.value(a);
        let ad = av.as_slice();
        let count: usize = out_shape.iter().product();
        assert_eq!(indices.len(), count, "gather index count != output size");
        let mut data = Vec::with_capacity(count);
        for &ix in indices.iter() {
            data.push(if ix == GATHER_ZERO { T::zero() } else { ad[ix] });
        }
        self.push(
            Tensor::new(out_shape, data),
            Op::Gather {
                input: a.0,
                indices,
            },
            self.needs(a),
        )
    }

    /// Row-wise layer normalization with affine parameters:
    /// `gamma * (x - mean) / sqrt(var + eps) + beta` per row.
    pub fn layer_norm_rows(&self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let av = self.value(a);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (m, n) = (av.rows(), av.cols());
        assert_eq!(gv.len(), n, "layer_norm gamma length");
        assert_eq!(bv.len(), n, "layer_norm beta length");
        let ad = av.as_slice();
        let (gd, bd) = (gv.as_slice(), bv.as_slice());
        let eps = T::from_f64(eps);
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut normalized = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) * inv_n;
            let var = row
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                * inv_n;
            let is = (var + eps).sqrt().recip();
            inv_std[i] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normalized[i * n + j] = xh;
                data[i * n + j] = gd[j] * xh + bd[j];
            }
        }
        let normalized = Tensor::new(vec![m, n], normalized);
        self.push(
            Tensor::new(vec![m, n], data),
            Op::LayerNormRows {
                input: a.0,
                gamma: gamma.0,
                beta: beta.0,
                normalized,
                inv_std,
            },
            self.needs(a) || self.needs(gamma) || self.needs(beta),
        )
    }

    /// Cross-entropy of `[1,V]` logits against a label id:
    /// `logsumexp(l) - l[label]`.
    pub fn cross_entropy_logits(&self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), 1, "cross_entropy_logits expects [1,V] logits");
        let n = lv.cols();
        assert!(label < n, "label {label} out of vocab {n}");
        let ld = lv.as_slice();
        let max = ld.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut probs = vec![T::zero(); n];
        let mut denom = T::zero();
        for j in 0..n {
            let e = (ld[j] - max).exp();
            probs[j] = e;
            denom += e;
        }
        for p in probs.iter_mut() {
            *p = *p / denom;
        }
        let loss = denom.ln() + max - ld[label];
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits {
                logits: logits.0,
                label,
                probs: Tensor::new(vec![1, n], probs),
            },
            self.needs(logits),
        )
    }

    /// Mean squared error over all elements of two same-shaped tensors.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        self.mean(self.mul(d, d))
    }

    /// Reverse sweep from a scalar objective. Returns one gradient per `wrt`
    /// handle, each shaped like its input; inputs the objective does not
    /// reach get zeros.
    pub fn grad(&self, objective: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>, NumError> {
        if let Some(op) = self.poisoned_op() {
            return Err(NumError::NonFinite { op });
        }
        let nodes = self.nodes.borrow();
        let obj = &nodes[objective.0];
        if !obj.value.is_scalar() {
            return Err(NumError::NonScalarObjective {
                shape: obj.value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[objective.0] = Some(vec![T::one()]);

        for id in (0..=objective.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
        }

        let out = wrt
            .iter()
            .map(|v| {
                let shape = nodes[v.0].value.shape().to_vec();
                match &grads[v.0] {
                    Some(g) => Tensor::new(shape, g.clone()),
                    None => Tensor::zeros(shape),
                }
            })
            .collect();
        Ok(out)
    }
}

fn matmul_raw<T: Real>(a: &Tensor<T>, b: &Tensor<T>, m: usize, k: usize, n: usize) -> Tensor<T> {
    let ad = a.as_slice();
    let bd = b.as_slice();
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn gelu_fwd<T: Real>(x: T) -> T {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_bwd<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

#[allow(clippy::too_many_lines)]
fn backprop_node<T: Real>(
    nodes: &[Node<T>],
    id: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let needs = |i: usize| nodes[i].needs_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {
            // Re-install the taken gradient so leaves keep theirs.
            grads[id] = Some(g.to_vec());
        }
        Op::Add(a, b) => {
            for &i in &[*a, *b] {
                if needs(i) {
                    accumulate(&mut grads[i], g.len(), |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
            }
        }
        Op::AddRow(a, row) => {
            if needs(*a) {
                accumulate(&mut grads[*a], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            if needs(*row) {
                let n = val(*row).len();
                let m = g.len() / n;
                accumulate(&mut grads[*row], n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                });
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(&mut grads[*a], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            if needs(*b) {
                accumulate(&mut grads[*b], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                let bv = val(*b).as_slice();
                accumulate(&mut grads[*a], g.len(), |buf| {
                    for ((o, &gv), &bvv) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gv * bvv;
                    }
                });
            }
            if needs(*b) {
                let av = val(*a).as_slice();
                accumulate(&mut grads[*b], g.len(), |buf| {
                    for ((o, &gv), &avv) in buf.iter_mut().zip(g).zip(av) {
                        *o += gv * avv;
                    }
                });
            }
        }
        Op::Scale(a, k) => {
            if needs(*a) {
                let k = *k;
                accumulate(&mut grads[*a], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g) {
                        *o += gv * k;
                    }
                });
            }
        }
        Op::Matmul(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            if needs(*a) {
                // dA = G · B^T
                let bd = bv.as_slice();
                accumulate(&mut grads[*a], m * k, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == T::zero() {
                                continue;
                            }
                            for p in 0..k {
                                buf[i * k + p] += gv * bd[p * n + j];
                            }
                        }
                    }
                });
            }
            if needs(*b) {
                // dB = A^T · G
                let ad = av.as_slice();
                accumulate(&mut grads[*b], k * n, |buf| {
                    for i in 0..m {
                        for p in 0..k {
                            let avv = ad[i * k + p];
                            if avv == T::zero() {
                                continue;
                            }
                            for j in 0..n {
                                buf[p * n + j] += avv * g[i * n + j];
                            }
                        }
                    }
                });
            }
        }
        Op::Transpose(a) => {
            if needs(*a) {
                let av = val(*a);
                let (m, n) = (av.rows(), av.cols());
                accumulate(&mut grads[*a], m * n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
        }
        Op::SoftmaxRows(a) => {
            if needs(*a) {
                let y = val(id);
                let (m, n) = (y.rows(), y.cols());
                let yd = y.as_slice();
                accumulate(&mut grads[*a], m * n, |buf| {
                    for i in 0..m {
                        let yrow = &yd[i * n..(i + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let dot = yrow
                            .iter()
                            .zip(grow)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for j in 0..n {
                            buf[i * n + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
        }
        Op::Gelu(a) => {
            if needs(*a) {
                let xv = val(*a).as_slice();
                accumulate(&mut grads[*a], g.len(), |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(xv) {
                        *o += gv * gelu_bwd(x);
                    }
                });
            }
        }
        Op::Relu(a) => {
            if needs(*a) {
                let xv = val(*a).as_slice();
                accumulate(&mut grads[*a], g.len(), |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g).zip(xv) {
                        if x > T::zero() {
                            *o += gv;
                        }
                    }
                });
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                let gv = g[0];
                let n = val(*a).len();
                accumulate(&mut grads[*a], n, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
        }
        Op::Mean(a) => {
            if needs(*a) {
                let n = val(*a).len();
                let gv = g[0] * T::from_f64(1.0 / n as f64);
                accumulate(&mut grads[*a], n, |buf| {
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                });
            }
        }
        Op::AddN(inputs) => {
            for &i in inputs {
                if needs(i) {
                    accumulate(&mut grads[i], g.len(), |buf| {
                        for (o, &gv) in buf.iter_mut().zip(g) {
                            *o += gv;
                        }
                    });
                }
            }
        }
        Op::MeanRows(a) => {
            if needs(*a) {
                let av = val(*a);
                let (m, n) = (av.rows(), av.cols());
                let inv = T::from_f64(1.0 / m as f64);
                accumulate(&mut grads[*a], m * n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j] * inv;
                        }
                    }
                });
            }
        }
        Op::ConcatRows(a, b) => {
            let alen = val(*a).len();
            if needs(*a) {
                accumulate(&mut grads[*a], alen, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(&g[..alen]) {
                        *o += gv;
                    }
                });
            }
            if needs(*b) {
                let blen = val(*b).len();
                accumulate(&mut grads[*b], blen, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(&g[alen..]) {
                        *o += gv;
                    }
                });
            }
        }
        Op::SliceRows { input, start, len } => {
            if needs(*input) {
                let iv = val(*input);
                let (m, n) = (iv.rows(), iv.cols());
                accumulate(&mut grads[*input], m * n, |buf| {
                    for (o, &gv) in buf[start * n..(start + len) * n].iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
        }
        Op::ConcatCols(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let m = av.rows();
            let (p, q) = (av.cols(), bv.cols());
            if needs(*a) {
                accumulate(&mut grads[*a], m * p, |buf| {
                    for i in 0..m {
                        for j in 0..p {
                            buf[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                });
            }
            if needs(*b) {
                accumulate(&mut grads[*b], m * q, |buf| {
                    for i in 0..m {
                        for j in 0..q {
                            buf[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                });
            }
        }
        Op::Gather { input, indices } => {
            if needs(*input) {
                let n = val(*input).len();
                accumulate(&mut grads[*input], n, |buf| {
                    for (&ix, &gv) in indices.iter().zip(g) {
                        if ix != GATHER_ZERO {
                            buf[ix] += gv;
                        }
                    }
                });
            }
        }
        Op::LayerNormRows {
            input,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let (m, n) = (normalized.rows(), normalized.cols());
            let xh = normalized.as_slice();
            if needs(*beta) {
                accumulate(&mut grads[*beta], n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                });
            }
            if needs(*gamma) {
                accumulate(&mut grads[*gamma], n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j] * xh[i * n + j];
                        }
                    }
                });
            }
            if needs(*input) {
                let gd = val(*gamma).as_slice();
                let inv_n = T::from_f64(1.0 / n as f64);
                accumulate(&mut grads[*input], m * n, |buf| {
                    for i in 0..m {
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..n {
                            let dxh = g[i * n + j] * gd[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[i * n + j];
                        }
                        let mean_dxh = sum_dxh * inv_n;
                        let mean_dxh_xh = sum_dxh_xh * inv_n;
                        for j in 0..n {
                            let dxh = g[i * n + j] * gd[j];
                            buf[i * n + j] +=
                                inv_std[i] * (dxh - mean_dxh - xh[i * n + j] * mean_dxh_xh);
                        }
                    }
                });
            }
        }
        Op::CrossEntropyLogits {
            logits,
            label,
            probs,
        } => {
            if needs(*logits) {
                let gv = g[0];
                let pd = probs.as_slice();
                let label = *label;
                accumulate(&mut grads[*logits], pd.len(), |buf| {
                    for (j, (o, &p)) in buf.iter_mut().zip(pd).enumerate() {
                        let delta = if j == label { T::one() } else { T::zero() };
                        *o += gv * (p - delta);
                    }
                });
            }
        }
    }
}
