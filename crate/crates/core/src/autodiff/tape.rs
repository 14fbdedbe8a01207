//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Operations are evaluated eagerly and appended to a [`Tape`]. Because a
//! node can only reference nodes that already exist, the tape is always in
//! topological order and [`Var::backward`] is a single reverse sweep.

use std::cell::{Ref, RefCell};

use super::tensor::{matmul_at, matmul_bt, sigmoid, softmax_rows, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    /// `scale * a + shift`
    Affine(usize, f64),
    PRelu(usize, usize),
    GroupNorm {
        x: usize,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mask(usize, Vec<f64>),
    Sigmoid(usize),
    Relu(usize),
    Clip(usize, f64, f64),
    SoftmaxRows(usize),
    Spike {
        v: usize,
        threshold: f64,
        beta: f64,
    },
    Transpose(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    RepeatRows(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanRows(usize),
    Pinball {
        pred: usize,
        target: usize,
        alpha: f64,
    },
    Huber {
        pred: usize,
        target: usize,
        alpha: f64,
        delta: f64,
        asymmetric: bool,
    },
    BceLogits {
        logits: usize,
        target: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// How the spike nonlinearity evaluates in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeMode {
    /// Heaviside step `v >= threshold`; the backward pass substitutes the
    /// fast-sigmoid surrogate.
    #[default]
    Heaviside,
    /// Smooth `x / (1 + beta |x|)`, whose exact derivative is the surrogate.
    /// Used to finite-difference the surrogate backward path.
    Relaxed,
}

/// Recording of one forward computation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spike_mode: SpikeMode,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(256)), spike_mode: SpikeMode::Heaviside }
    }

    pub fn with_spike_mode(spike_mode: SpikeMode) -> Self {
        Tape { nodes: RefCell::new(Vec::with_capacity(256)), spike_mode }
    }

    pub fn spike_mode(&self) -> SpikeMode {
        self.spike_mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Fails if any recorded value is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        for (i, n) in nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(Error::Numeric(format!("non-finite value at tape entry {i} ({:?})", op_name(&n.op))));
            }
        }
        Ok(())
    }

    fn unary(&self, a: usize, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'_> {
        let value = f(&self.value_ref(a));
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    fn backward_from(&self, root: usize) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(nodes[root].value.map(|_| 1.0));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let wants = |i: usize| nodes[i].needs_grad;
            let acc = |i: usize, contrib: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !wants(i) {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims();
                    let n = val(*b).cols();
                    if wants(*a) {
                        let da = matmul_bt(g.data(), val(*b).data(), m, n, k);
                        acc(*a, Tensor::matrix(m, k, da), &mut grads);
                    }
                    if wants(*b) {
                        let db = matmul_at(val(*a).data(), g.data(), m, k, n);
                        acc(*b, Tensor::matrix(k, n, db), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, reshape_like(&g, val(*a)), &mut grads);
                    acc(*b, reshape_like(&g, val(*b)), &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, reshape_like(&g, val(*a)), &mut grads);
                    acc(*b, reshape_like(&g.map(|x| -x), val(*b)), &mut grads);
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, reshape_like(&g.zip_map(val(*b), |x, y| x * y), val(*a)), &mut grads);
                    }
                    if wants(*b) {
                        acc(*b, reshape_like(&g.zip_map(val(*a), |x, y| x * y), val(*b)), &mut grads);
                    }
                }
                Op::AddRow(a, row) => {
                    acc(*a, reshape_like(&g, val(*a)), &mut grads);
                    if wants(*row) {
                        acc(*row, reshape_like(&column_sums(&g), val(*row)), &mut grads);
                    }
                }
                Op::MulRow(a, row) => {
                    let (m, n) = g.dims();
                    let r = val(*row).data();
                    if wants(*a) {
                        let mut da = g.clone();
                        for i in 0..m {
                            for j in 0..n {
                                da.data_mut()[i * n + j] *= r[j];
                            }
                        }
                        acc(*a, reshape_like(&da, val(*a)), &mut grads);
                    }
                    if wants(*row) {
                        let x = val(*a).data();
                        let mut dr = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                dr[j] += g.data()[i * n + j] * x[i * n + j];
                            }
                        }
                        acc(*row, reshape_like(&Tensor::row(dr), val(*row)), &mut grads);
                    }
                }
                Op::Affine(a, scale) => {
                    let s = *scale;
                    acc(*a, reshape_like(&g.map(|x| x * s), val(*a)), &mut grads);
                }
                Op::PRelu(x, slope) => {
                    let xv = val(*x);
                    let a = val(*slope).item();
                    if wants(*x) {
                        let dx = g.zip_map(xv, |gi, xi| if xi >= 0.0 { gi } else { a * gi });
                        acc(*x, dx, &mut grads);
                    }
                    if wants(*slope) {
                        let da: f64 =
                            g.data().iter().zip(xv.data()).filter(|(_, &xi)| xi < 0.0).map(|(gi, xi)| gi * xi).sum();
                        acc(*slope, reshape_like(&Tensor::scalar(da), val(*slope)), &mut grads);
                    }
                }
                Op::GroupNorm { x, groups, xhat, inv_std } => {
                    let (m, n) = g.dims();
                    let size = n / groups;
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for grp in 0..*groups {
                            let lo = i * n + grp * size;
                            let hi = lo + size;
                            let inv = inv_std[i * groups + grp];
                            let dy = &g.data()[lo..hi];
                            let xh = &xhat[lo..hi];
                            let sum_dy: f64 = dy.iter().sum();
                            let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a * b).sum();
                            let nf = size as f64;
                            for k in 0..size {
                                dx[lo + k] = inv / nf * (nf * dy[k] - sum_dy - xh[k] * sum_dy_xh);
                            }
                        }
                    }
                    acc(*x, Tensor::matrix(m, n, dx), &mut grads);
                }
                Op::Mask(a, mask) => {
                    let mut d = g.clone();
                    for (v, m) in d.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    acc(*a, reshape_like(&d, val(*a)), &mut grads);
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s));
                    acc(*a, reshape_like(&d, val(*a)), &mut grads);
                }
                Op::Relu(a) => {
                    let d = g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    acc(*a, reshape_like(&d, val(*a)), &mut grads);
                }
                Op::Clip(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let d = g.zip_map(val(*a), |gi, x| if x > lo && x < hi { gi } else { 0.0 });
                    acc(*a, reshape_like(&d, val(*a)), &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = g.dims();
                    let s = node.value.data();
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        let row = i * n..(i + 1) * n;
                        let dot: f64 = g.data()[row.clone()].iter().zip(&s[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            d[j] = s[j] * (g.data()[j] - dot);
                        }
                    }
                    acc(*a, reshape_like(&Tensor::matrix(m, n, d), val(*a)), &mut grads);
                }
                Op::Spike { v, threshold, beta } => {
                    let (th, b) = (*threshold, *beta);
                    let d = g.zip_map(val(*v), |gi, x| gi * surrogate(x - th, b));
                    acc(*v, d, &mut grads);
                }
                Op::Transpose(a) => {
                    acc(*a, reshape_like(&g.transpose(), val(*a)), &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let m = g.rows();
                    let n = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = val(p).cols();
                        if wants(p) {
                            let mut d = Vec::with_capacity(m * pc);
                            for i in 0..m {
                                d.extend_from_slice(&g.data()[i * n + offset..i * n + offset + pc]);
                            }
                            acc(p, reshape_like(&Tensor::matrix(m, pc, d), val(p)), &mut grads);
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (m, n) = val(*a).dims();
                    let w = g.cols();
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        d[i * n + start..i * n + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    acc(*a, reshape_like(&Tensor::matrix(m, n, d), val(*a)), &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let n = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pr = val(p).rows();
                        if wants(p) {
                            let d = g.data()[offset * n..(offset + pr) * n].to_vec();
                            acc(p, reshape_like(&Tensor::matrix(pr, n, d), val(p)), &mut grads);
                        }
                        offset += pr;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (m, n) = val(*a).dims();
                    let mut d = vec![0.0; m * n];
                    d[start * n..start * n + g.len()].copy_from_slice(g.data());
                    acc(*a, reshape_like(&Tensor::matrix(m, n, d), val(*a)), &mut grads);
                }
                Op::RepeatRows(a) => {
                    acc(*a, reshape_like(&column_sums(&g), val(*a)), &mut grads);
                }
                Op::SumAll(a) => {
                    let s = g.item();
                    acc(*a, val(*a).map(|_| s), &mut grads);
                }
                Op::MeanAll(a) => {
                    let s = g.item() / val(*a).len() as f64;
                    acc(*a, val(*a).map(|_| s), &mut grads);
                }
                Op::MeanRows(a) => {
                    let (m, n) = val(*a).dims();
                    let inv = 1.0 / m as f64;
                    let mut d = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] = g.data()[j] * inv;
                        }
                    }
                    acc(*a, reshape_like(&Tensor::matrix(m, n, d), val(*a)), &mut grads);
                }
                Op::Pinball { pred, target, alpha } => {
                    let al = *alpha;
                    let d = Tensor::matrix(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(val(*pred).data().iter().zip(val(*target).data()))
                            .map(|(gi, (q, y))| gi * pinball_dpred(y - q, al))
                            .collect(),
                    );
                    acc(*pred, reshape_like(&d, val(*pred)), &mut grads);
                }
                Op::Huber { pred, target, alpha, delta, asymmetric } => {
                    let (al, de, asym) = (*alpha, *delta, *asymmetric);
                    let d = Tensor::matrix(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(val(*pred).data().iter().zip(val(*target).data()))
                            .map(|(gi, (q, y))| gi * huber_dpred(y - q, al, de, asym))
                            .collect(),
                    );
                    acc(*pred, reshape_like(&d, val(*pred)), &mut grads);
                }
                Op::BceLogits { logits, target } => {
                    let d = Tensor::matrix(
                        g.rows(),
                        g.cols(),
                        g.data()
                            .iter()
                            .zip(val(*logits).data().iter().zip(val(*target).data()))
                            .map(|(gi, (z, y))| gi * (sigmoid(*z) - y))
                            .collect(),
                    );
                    acc(*logits, reshape_like(&d, val(*logits)), &mut grads);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Affine(..) => "affine",
        Op::PRelu(..) => "prelu",
        Op::GroupNorm { .. } => "group_norm",
        Op::Mask(..) => "mask",
        Op::Sigmoid(..) => "sigmoid",
        Op::Relu(..) => "relu",
        Op::Clip(..) => "clip",
        Op::SoftmaxRows(..) => "softmax",
        Op::Spike { .. } => "spike",
        Op::Transpose(..) => "transpose",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::RepeatRows(..) => "repeat_rows",
        Op::SumAll(..) => "sum",
        Op::MeanAll(..) => "mean",
        Op::MeanRows(..) => "mean_rows",
        Op::Pinball { .. } => "pinball",
        Op::Huber { .. } => "huber",
        Op::BceLogits { .. } => "bce",
    }
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        g.clone()
    } else {
        g.clone().reshape(like.shape().to_vec()).expect("gradient length matches operand")
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let (m, n) = g.dims();
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(g.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::row(out)
}

/// Fast-sigmoid pseudo-derivative `1 / (1 + beta |x|)^2`.
pub fn surrogate(x: f64, beta: f64) -> f64 {
    let d = 1.0 + beta * x.abs();
    1.0 / (d * d)
}

fn pinball_dpred(r: f64, alpha: f64) -> f64 {
    if r > 0.0 {
        -alpha
    } else if r < 0.0 {
        1.0 - alpha
    } else {
        0.5 - alpha
    }
}

fn huber_dpred(r: f64, alpha: f64, delta: f64, asymmetric: bool) -> f64 {
    let dh = if r.abs() <= delta { r } else { delta * r.signum() };
    let w = if !asymmetric {
        1.0
    } else if r > 0.0 {
        alpha
    } else {
        1.0 - alpha
    };
    -w * dh
}

/// Gradients produced by [`Var::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like its value when nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| v.value().zeros_like())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.tape.value_ref(self.id).shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.id).item()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.tape.value_ref(self.id).dims()
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward_from(self.id)
    }

    fn binary(self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'t> {
        let value = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(other.id);
            f(&a, &b)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    pub fn try_matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.tape.value_ref(self.id).matmul(&self.tape.value_ref(other.id))?;
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), needs))
    }

    /// Matrix product. Panics on mismatched inner dimensions; use
    /// [`Var::try_matmul`] for untrusted shapes.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.try_matmul(other).expect("matmul shape")
    }

    fn assert_same(&self, other: &Var<'t>, what: &str) {
        let (a, b) = (self.dims(), other.dims());
        assert_eq!(a, b, "{what}: shape {a:?} vs {b:?}");
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.assert_same(&other, "add");
        self.binary(other, |a, b| a.zip_map(b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.assert_same(&other, "sub");
        self.binary(other, |a, b| a.zip_map(b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.assert_same(&other, "mul");
        self.binary(other, |a, b| a.zip_map(b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    /// Adds a `1 x n` row to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (_, n) = self.dims();
        assert_eq!(row.dims(), (1, n), "add_row width");
        self.binary(
            row,
            |a, r| {
                let mut out = a.clone();
                let rd = r.data();
                for chunk in out.data_mut().chunks_mut(n) {
                    for (v, b) in chunk.iter_mut().zip(rd) {
                        *v += b;
                    }
                }
                out
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// Multiplies every row of `self` elementwise by a `1 x n` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (_, n) = self.dims();
        assert_eq!(row.dims(), (1, n), "mul_row width");
        self.binary(
            row,
            |a, r| {
                let mut out = a.clone();
                let rd = r.data();
                for chunk in out.data_mut().chunks_mut(n) {
                    for (v, b) in chunk.iter_mut().zip(rd) {
                        *v *= b;
                    }
                }
                out
            },
            Op::MulRow(self.id, row.id),
        )
    }

    /// `scale * self + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(|x| scale * x + shift), Op::Affine(self.id, scale))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn one_minus(self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    /// Parametric ReLU with a single learnable slope (a `1 x 1` var).
    pub fn prelu(self, slope: Var<'t>) -> Var<'t> {
        assert_eq!(slope.dims(), (1, 1), "prelu slope must be scalar");
        self.binary(
            slope,
            |x, a| {
                let a = a.item();
                x.map(|v| if v >= 0.0 { v } else { a * v })
            },
            Op::PRelu(self.id, slope.id),
        )
    }

    /// Per-row group normalisation without affine parameters.
    pub fn group_norm(self, groups: usize, eps: f64) -> Result<Var<'t>> {
        let (m, n) = self.dims();
        if groups == 0 || n % groups != 0 {
            return Err(Error::config(format!("{n} features cannot split into {groups} groups")));
        }
        let size = n / groups;
        let (out, inv_std) = {
            let x = self.tape.value_ref(self.id);
            let mut out = vec![0.0; m * n];
            let mut inv_std = vec![0.0; m * groups];
            for i in 0..m {
                for g in 0..groups {
                    let lo = i * n + g * size;
                    let seg = &x.data()[lo..lo + size];
                    let mean = seg.iter().sum::<f64>() / size as f64;
                    let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[i * groups + g] = inv;
                    for k in 0..size {
                        out[lo + k] = (seg[k] - mean) * inv;
                    }
                }
            }
            (out, inv_std)
        };
        let needs = self.tape.needs(&[self.id]);
        let value = Tensor::matrix(m, n, out.clone());
        Ok(self.tape.push(value, Op::GroupNorm { x: self.id, groups, xhat: out, inv_std }, needs))
    }

    /// Elementwise multiplication by a fixed mask (dropout and friends).
    pub fn mask(self, mask: Vec<f64>) -> Var<'t> {
        let (m, n) = self.dims();
        assert_eq!(mask.len(), m * n, "mask length");
        let value = {
            let a = self.tape.value_ref(self.id);
            let mut out = a.clone();
            for (v, k) in out.data_mut().iter_mut().zip(&mask) {
                *v *= k;
            }
            out
        };
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, Op::Mask(self.id, mask), needs)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn clip(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(|x| x.clamp(lo, hi)), Op::Clip(self.id, lo, hi))
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.tape.unary(self.id, softmax_rows, Op::SoftmaxRows(self.id))
    }

    /// Spike nonlinearity `v >= threshold` with a fast-sigmoid surrogate
    /// gradient of slope `beta`.
    pub fn spike(self, threshold: f64, beta: f64) -> Var<'t> {
        let mode = self.tape.spike_mode;
        self.tape.unary(
            self.id,
            |a| match mode {
                SpikeMode::Heaviside => a.map(|v| if v >= threshold { 1.0 } else { 0.0 }),
                SpikeMode::Relaxed => a.map(|v| {
                    let x = v - threshold;
                    x / (1.0 + beta * x.abs())
                }),
            },
            Op::Spike { v: self.id, threshold, beta },
        )
    }

    pub fn transpose(self) -> Var<'t> {
        self.tape.unary(self.id, Tensor::transpose, Op::Transpose(self.id))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = ids.iter().map(|&i| tape.value_ref(i)).collect();
            let m = vals[0].rows();
            assert!(vals.iter().all(|v| v.rows() == m), "concat_cols row counts differ");
            let n: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for v in &vals {
                    data.extend_from_slice(v.row_slice(i));
                }
            }
            Tensor::matrix(m, n, data)
        };
        let needs = tape.needs(&ids);
        tape.push(value, Op::ConcatCols(ids), needs)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let (m, n) = self.dims();
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        self.tape.unary(
            self.id,
            |a| {
                let mut data = Vec::with_capacity(m * (end - start));
                for i in 0..m {
                    data.extend_from_slice(&a.row_slice(i)[start..end]);
                }
                Tensor::matrix(m, end - start, data)
            },
            Op::SliceCols(self.id, start),
        )
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = ids.iter().map(|&i| tape.value_ref(i)).collect();
            let n = vals[0].cols();
            assert!(vals.iter().all(|v| v.cols() == n), "concat_rows column counts differ");
            let m: usize = vals.iter().map(|v| v.rows()).sum();
            let mut data = Vec::with_capacity(m * n);
            for v in &vals {
                data.extend_from_slice(v.data());
            }
            Tensor::matrix(m, n, data)
        };
        let needs = tape.needs(&ids);
        tape.push(value, Op::ConcatRows(ids), needs)
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let m = self.dims().0;
        assert!(start < end && end <= m, "slice_rows {start}..{end} of {m}");
        self.tape.unary(self.id, |a| a.slice_rows(start, end), Op::SliceRows(self.id, start))
    }

    /// Tiles a `1 x n` row into `rows x n`.
    pub fn repeat_rows(self, rows: usize) -> Var<'t> {
        let (r, n) = self.dims();
        assert_eq!(r, 1, "repeat_rows needs a single row");
        self.tape.unary(self.id, |a| Tensor::matrix(rows, n, a.data().repeat(rows)), Op::RepeatRows(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, |a| Tensor::scalar(a.sum()), Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(self.id, |a| Tensor::scalar(a.sum() / a.len() as f64), Op::MeanAll(self.id))
    }

    /// Column means: `m x n` to `1 x n`.
    pub fn mean_rows(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let (m, n) = a.dims();
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, v) in out.iter_mut().zip(a.row_slice(i)) {
                        *o += v;
                    }
                }
                Tensor::row(out.into_iter().map(|v| v / m as f64).collect())
            },
            Op::MeanRows(self.id),
        )
    }

    /// Elementwise pinball loss of predictions `self` against `target`.
    pub fn pinball(self, target: Var<'t>, alpha: f64) -> Var<'t> {
        self.assert_same(&target, "pinball");
        self.binary(
            target,
            |q, y| y.zip_map(q, |yv, qv| crate::eqrnn::loss::pinball(yv, qv, alpha)),
            Op::Pinball { pred: self.id, target: target.id, alpha },
        )
    }

    /// Elementwise Huber-type quantile loss; see [`crate::eqrnn::loss`].
    pub fn huber(self, target: Var<'t>, alpha: f64, delta: f64, asymmetric: bool) -> Var<'t> {
        self.assert_same(&target, "huber");
        self.binary(
            target,
            |q, y| y.zip_map(q, |yv, qv| crate::eqrnn::loss::huber_value(yv - qv, alpha, delta, asymmetric)),
            Op::Huber { pred: self.id, target: target.id, alpha, delta, asymmetric },
        )
    }

    /// Elementwise binary cross-entropy of `sigmoid(self)` against `target`.
    pub fn bce_with_logits(self, target: Var<'t>) -> Var<'t> {
        self.assert_same(&target, "bce");
        self.binary(
            target,
            |z, y| z.zip_map(y, |zv, yv| zv.max(0.0) - zv * yv + (-zv.abs()).exp().ln_1p()),
            Op::BceLogits { logits: self.id, target: target.id },
        )
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        Var::mul(self, rhs)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(self)
    }
}
