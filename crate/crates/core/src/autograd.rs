//! A small reverse-mode tape over dense tensors.
//!
//! Every forward pass records its operations on a fresh [`Tape`]. Leaves that
//! are marked as requiring a gradient get one from [`Tape::backward`]; nodes
//! that do not depend on such a leaf are never visited in the backward sweep,
//! so frozen parameters receive no gradient at all.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Concat(Vec<Var>),
    BceWithLogits {
        logits: Var,
        targets: Arc<[T]>,
    },
    WeightedSum {
        x: Var,
        weights: Arc<[T]>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the leaves that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Numerically stable `−[y ln σ(z) + (1−y) ln(1−σ(z))]`.
pub(crate) fn bce_term<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        assert_eq!(s.len(), 2, "expected a matrix, got shape {s:?}");
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.dims2(a);
        let (k2, m) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::from_vec(&[n, m], out).unwrap(),
            Op::MatMul(a, b),
            tracked,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = self.dims2(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let tracked = self.tracked(a);
        self.push(
            Tensor::from_vec(&[m, n], out).unwrap(),
            Op::Transpose(a),
            tracked,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).len(),
            self.value(b).len(),
            "add of {:?} and {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::Add(a, b),
            tracked,
        )
    }

    /// `a (n×m) + b (m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, m) = self.dims2(a);
        assert_eq!(self.value(b).len(), m, "row bias width");
        let bias = self.value(b).data();
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| *x + bias[i % m])
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::AddRow(a, b),
            tracked,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len());
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::Mul(a, b),
            tracked,
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data: Vec<T> = self.value(a).data().iter().map(|x| *x * s).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a);
        self.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::Scale(a, s),
            tracked,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.value(a).data().iter().map(|x| gelu(*x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Gelu(a), tracked)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.dims2(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..m {
                let e = (row[j] - mx).exp();
                out[i * m + j] = e;
                sum += e;
            }
            for o in &mut out[i * m..(i + 1) * m] {
                *o /= sum;
            }
        }
        let tracked = self.tracked(a);
        self.push(
            Tensor::from_vec(&[n, m], out).unwrap(),
            Op::SoftmaxRows(a),
            tracked,
        )
    }

    /// Layer normalization over the last axis of a matrix, with affine
    /// parameters `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (n, d) = self.dims2(x);
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let dn = T::from_usize_lossy(d);
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            Tensor::from_vec(&[n, d], out).unwrap(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        )
    }

    /// `out[i] = x[index[i]]` over the flattened data, reshaped to `shape`.
    /// Covers reshapes, permutations, slicing and tiling.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Var {
        assert_eq!(numel(shape), index.len(), "gather shape vs index length");
        let src = self.value(x).data();
        let data: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let tracked = self.tracked(x);
        self.push(
            Tensor::from_vec(shape, data).unwrap(),
            Op::Gather { x, index },
            tracked,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let n = self.value(x).len();
        assert_eq!(numel(shape), n, "reshape element count");
        let index: Arc<[usize]> = (0..n).collect();
        self.gather(x, index, shape)
    }

    /// Rows `[start, start+len)` of a matrix.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (_, m) = self.dims2(x);
        let index: Arc<[usize]> = (start * m..(start + len) * m).collect();
        self.gather(x, index, &[len, m])
    }

    /// Flat concatenation of the parts, reshaped to `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Var {
        let mut data = Vec::with_capacity(numel(shape));
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        assert_eq!(data.len(), numel(shape), "concat shape");
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(
            Tensor::from_vec(shape, data).unwrap(),
            Op::Concat(parts.to_vec()),
            tracked,
        )
    }

    /// Mean binary cross-entropy of `logits` against `targets`, in the stable
    /// logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<[T]>) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), targets.len(), "bce shape");
        let n = T::from_usize_lossy(z.len());
        let total: T = z
            .iter()
            .zip(targets.iter())
            .map(|(z, y)| bce_term(*z, *y))
            .sum();
        let tracked = self.tracked(logits);
        self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits { logits, targets },
            tracked,
        )
    }

    /// `Σ x ⊙ w`, a scalar probe.
    pub fn weighted_sum(&mut self, x: Var, weights: Arc<[T]>) -> Var {
        let v = self.value(x).data();
        assert_eq!(v.len(), weights.len());
        let s: T = v.iter().zip(weights.iter()).map(|(a, b)| *a * *b).sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, tracked)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.tracked(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].tracked {
                return;
            }
            let len = nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims2(*a);
                let (_, m) = self.dims2(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |ga| matmul_bt_acc(g, bv, ga, n, m, k));
                acc(*b, &mut |gb| matmul_at_acc(av, g, gb, n, k, m));
            }
            Op::Transpose(a) => {
                let (n, m) = self.dims2(*a);
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        for c in 0..m {
                            ga[r * m + c] += g[c * n + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |gv| {
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += *x;
                        }
                    });
                }
            }
            Op::AddRow(a, b) => {
                let m = self.value(*b).len();
                acc(*a, &mut |ga| {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += *x;
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, x) in g.iter().enumerate() {
                        gb[j % m] += *x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |ga| {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += *x * *y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av) {
                        *o += *x * *y;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += *x * *s;
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((o, x), z) in ga.iter_mut().zip(g).zip(av) {
                        *o += *x * gelu_grad(*z);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = self.dims2(*a);
                let y = node.value.data();
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        let row = r * m..(r + 1) * m;
                        let dot: T = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(p, q)| *p * *q)
                            .sum();
                        for j in row {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = self.dims2(*x);
                let gm = self.value(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for r in 0..n {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..n {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
                let dn = T::from_usize_lossy(d);
                acc(*x, &mut |gx| {
                    for r in 0..n {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let gh = g[r * d + j] * gm[j];
                            s1 += gh;
                            s2 += gh * xhat[r * d + j];
                        }
                        let k = inv_std[r] / dn;
                        for j in 0..d {
                            let gh = g[r * d + j] * gm[j];
                            gx[r * d + j] += k * (dn * gh - s1 - xhat[r * d + j] * s2);
                        }
                    }
                });
            }
            Op::Gather { x, index } => {
                acc(*x, &mut |gx| {
                    for (o, &src) in index.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let slice = &g[offset..offset + len];
                    acc(*p, &mut |gp| {
                        for (o, x) in gp.iter_mut().zip(slice) {
                            *o += *x;
                        }
                    });
                    offset += len;
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = g[0] / T::from_usize_lossy(z.len());
                acc(*logits, &mut |gz| {
                    for ((o, zv), y) in gz.iter_mut().zip(z).zip(targets.iter()) {
                        *o += (sigmoid(*zv) - *y) * scale;
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, &mut |gx| {
                    for (o, w) in gx.iter_mut().zip(weights.iter()) {
                        *o += *w * g[0];
                    }
                });
            }
        }
    }
}
