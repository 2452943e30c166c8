//! Reverse-mode automatic differentiation over a small fixed operation set.
//!
//! Model code is written once against the [`Graph`] trait. Two backends
//! implement it: [`Tape`] records every operation so gradients can be
//! replayed backward, and [`Eager`] just computes values, which is what the
//! long evaluation rollouts use.

use crate::params::{ParamId, ParameterStore};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("bce_with_logits: mask selects no positions")]
    EmptyMask,
}

pub type AdResult<T> = Result<T, AdError>;

fn mismatch(op: &'static str, ts: &[&Tensor]) -> AdError {
    AdError::ShapeMismatch {
        op,
        shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

/// The operation set shared by the recording tape and the eager evaluator.
pub trait Graph {
    type V: Clone;

    fn constant(&mut self, t: Tensor) -> Self::V;
    fn param(&mut self, store: &ParameterStore, id: ParamId) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    /// `m · x` for `m: [r, c]`, `x: [c]`.
    fn matvec(&mut self, m: &Self::V, x: &Self::V) -> AdResult<Self::V>;
    /// `mᵀ · x` for `m: [r, c]`, `x: [r]`.
    fn matvec_t(&mut self, m: &Self::V, x: &Self::V) -> AdResult<Self::V>;
    /// `w · x + b`.
    fn affine(&mut self, w: &Self::V, b: &Self::V, x: &Self::V) -> AdResult<Self::V>;
    fn outer(&mut self, a: &Self::V, b: &Self::V) -> AdResult<Self::V>;
    fn dot(&mut self, a: &Self::V, b: &Self::V) -> AdResult<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> AdResult<Self::V>;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> AdResult<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> AdResult<Self::V>;
    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn softplus(&mut self, a: &Self::V) -> Self::V;
    fn relu(&mut self, a: &Self::V) -> Self::V;
    fn softmax(&mut self, a: &Self::V) -> AdResult<Self::V>;
    /// `y_i = Σ_k s_k · w_{(i − offset_k) mod n}`.
    fn circ_conv(&mut self, w: &Self::V, s: &Self::V, offsets: &[i64]) -> AdResult<Self::V>;
    /// Element-wise `a^g` for non-negative `a` and a scalar exponent `g`.
    fn pow(&mut self, a: &Self::V, g: &Self::V) -> AdResult<Self::V>;
    /// `a / Σ a`.
    fn normalize(&mut self, a: &Self::V) -> AdResult<Self::V>;
    fn concat(&mut self, parts: &[&Self::V]) -> AdResult<Self::V>;
    fn slice(&mut self, a: &Self::V, start: usize, len: usize) -> AdResult<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    /// Erase/add memory update `m'_ij = m_ij (1 − w_i e_j) + w_i a_j`.
    /// Takes the memory by value so the eager backend can update in place.
    fn erase_add(&mut self, mem: Self::V, w: &Self::V, e: &Self::V, a: &Self::V) -> AdResult<Self::V>;
    /// Mean binary cross-entropy over masked positions, computed from logits.
    fn bce_with_logits(&mut self, logits: &Self::V, targets: &Tensor, mask: &Tensor) -> AdResult<Self::V>;
}

// ---------------------------------------------------------------------------
// Forward kernels shared by both backends.

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn bce_term(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
}

fn zip(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> AdResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, &[a, b]));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::new(a.shape().to_vec(), data))
}

fn check_vec(op: &'static str, ts: &[&Tensor]) -> AdResult<()> {
    if ts.iter().all(|t| t.is_vector()) {
        Ok(())
    } else {
        Err(mismatch(op, ts))
    }
}

fn matvec_k(m: &Tensor, x: &Tensor) -> AdResult<Tensor> {
    if !m.is_matrix() || !x.is_vector() || m.cols() != x.len() {
        return Err(mismatch("matvec", &[m, x]));
    }
    let c = m.cols();
    let xs = x.data();
    let out = m.data().chunks_exact(c).map(|row| dot_k(row, xs)).collect();
    Ok(Tensor::vector(out))
}

/// Dot product with four independent accumulators.
fn dot_k(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn matvec_t_k(m: &Tensor, x: &Tensor) -> AdResult<Tensor> {
    if !m.is_matrix() || !x.is_vector() || m.rows() != x.len() {
        return Err(mismatch("matvec_t", &[m, x]));
    }
    let c = m.cols();
    let mut out = vec![0.0; c];
    for (row, &xi) in m.data().chunks_exact(c).zip(x.data()) {
        if xi == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(row) {
            *o += xi * v;
        }
    }
    Ok(Tensor::vector(out))
}

fn affine_k(w: &Tensor, b: &Tensor, x: &Tensor) -> AdResult<Tensor> {
    if !w.is_matrix() || !b.is_vector() || !x.is_vector() || w.cols() != x.len() || w.rows() != b.len() {
        return Err(mismatch("affine", &[w, b, x]));
    }
    let mut y = matvec_k(w, x)?;
    for (o, &bi) in y.data_mut().iter_mut().zip(b.data()) {
        *o += bi;
    }
    Ok(y)
}

fn outer_k(a: &Tensor, b: &Tensor) -> AdResult<Tensor> {
    check_vec("outer", &[a, b])?;
    let mut data = Vec::with_capacity(a.len() * b.len());
    for &x in a.data() {
        data.extend(b.data().iter().map(|&y| x * y));
    }
    Ok(Tensor::matrix(a.len(), b.len(), data))
}

fn softmax_k(a: &Tensor) -> AdResult<Tensor> {
    check_vec("softmax", &[a])?;
    let m = a.max();
    let exps: Vec<f64> = a.data().iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Ok(Tensor::vector(exps.into_iter().map(|e| e / s).collect()))
}

fn wrap(i: usize, offset: i64, n: usize) -> usize {
    (i as i64 - offset).rem_euclid(n as i64) as usize
}

fn circ_conv_k(w: &Tensor, s: &Tensor, offsets: &[i64]) -> AdResult<Tensor> {
    check_vec("circ_conv", &[w, s])?;
    if s.len() != offsets.len() {
        return Err(mismatch("circ_conv", &[w, s]));
    }
    let n = w.len();
    let wd = w.data();
    let mut out = vec![0.0; n];
    for (&sk, &ok) in s.data().iter().zip(offsets) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += sk * wd[wrap(i, ok, n)];
        }
    }
    Ok(Tensor::vector(out))
}

fn pow_k(a: &Tensor, g: &Tensor) -> AdResult<Tensor> {
    if g.len() != 1 {
        return Err(mismatch("pow", &[a, g]));
    }
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(AdError::Domain {
            op: "pow",
            reason: "negative base".into(),
        });
    }
    let e = g.item();
    Ok(map(a, |v| v.powf(e)))
}

fn normalize_k(a: &Tensor) -> AdResult<Tensor> {
    let s = a.sum();
    if s == 0.0 || !s.is_finite() {
        return Err(AdError::Domain {
            op: "normalize",
            reason: format!("sum is {s}"),
        });
    }
    Ok(map(a, |v| v / s))
}

fn concat_k(parts: &[&Tensor]) -> AdResult<Tensor> {
    check_vec("concat", parts)?;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    if data.is_empty() {
        return Err(mismatch("concat", parts));
    }
    Ok(Tensor::vector(data))
}

fn slice_k(a: &Tensor, start: usize, len: usize) -> AdResult<Tensor> {
    if !a.is_vector() || len == 0 || start + len > a.len() {
        return Err(AdError::ShapeMismatch {
            op: "slice",
            shapes: vec![a.shape().to_vec(), vec![start, len]],
        });
    }
    Ok(Tensor::vector(a.data()[start..start + len].to_vec()))
}

fn check_erase_add(mem: &Tensor, w: &Tensor, e: &Tensor, a: &Tensor) -> AdResult<()> {
    if !mem.is_matrix()
        || !w.is_vector()
        || !e.is_vector()
        || !a.is_vector()
        || mem.rows() != w.len()
        || mem.cols() != e.len()
        || mem.cols() != a.len()
    {
        return Err(mismatch("erase_add", &[mem, w, e, a]));
    }
    Ok(())
}

fn erase_add_in_place(mem: &mut Tensor, w: &Tensor, e: &Tensor, a: &Tensor) {
    let c = mem.cols();
    let (ed, ad) = (e.data(), a.data());
    for (row, &wi) in mem.data_mut().chunks_exact_mut(c).zip(w.data()) {
        if wi == 0.0 {
            continue;
        }
        for ((m, &ej), &aj) in row.iter_mut().zip(ed).zip(ad) {
            *m = *m * (1.0 - wi * ej) + wi * aj;
        }
    }
}

fn check_bce(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> AdResult<f64> {
    if logits.shape() != targets.shape() || logits.shape() != mask.shape() {
        return Err(mismatch("bce_with_logits", &[logits, targets, mask]));
    }
    let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(targets) || !binary(mask) {
        return Err(AdError::Domain {
            op: "bce_with_logits",
            reason: "targets and mask must be 0/1".into(),
        });
    }
    let count = mask.sum();
    if count == 0.0 {
        return Err(AdError::EmptyMask);
    }
    Ok(count)
}

fn bce_k(logits: &Tensor, targets: &Tensor, mask: &Tensor) -> AdResult<Tensor> {
    let count = check_bce(logits, targets, mask)?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .zip(mask.data())
        .filter(|(_, &m)| m != 0.0)
        .map(|((&z, &t), _)| bce_term(z, t))
        .sum();
    Ok(Tensor::scalar(total / count))
}

// ---------------------------------------------------------------------------
// Eager backend.

/// Computes values without recording anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Graph for Eager {
    type V = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }
    fn param(&mut self, store: &ParameterStore, id: ParamId) -> Tensor {
        store.value(id).clone()
    }
    fn value<'a>(&'a self, v: &'a Tensor) -> &'a Tensor {
        v
    }
    fn matvec(&mut self, m: &Tensor, x: &Tensor) -> AdResult<Tensor> {
        matvec_k(m, x)
    }
    fn matvec_t(&mut self, m: &Tensor, x: &Tensor) -> AdResult<Tensor> {
        matvec_t_k(m, x)
    }
    fn affine(&mut self, w: &Tensor, b: &Tensor, x: &Tensor) -> AdResult<Tensor> {
        affine_k(w, b, x)
    }
    fn outer(&mut self, a: &Tensor, b: &Tensor) -> AdResult<Tensor> {
        outer_k(a, b)
    }
    fn dot(&mut self, a: &Tensor, b: &Tensor) -> AdResult<Tensor> {
        let p = zip("dot", a, b, |x, y| x * y)?;
        Ok(Tensor::scalar(p.sum()))
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> AdResult<Tensor> {
        zip("add", a, b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Tensor, b: &Tensor) -> AdResult<Tensor> {
        zip("sub", a, b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Tensor, b: &Tensor) -> AdResult<Tensor> {
        zip("mul", a, b, |x, y| x * y)
    }
    fn add_scalar(&mut self, a: &Tensor, c: f64) -> Tensor {
        map(a, |v| v + c)
    }
    fn scale(&mut self, a: &Tensor, c: f64) -> Tensor {
        map(a, |v| v * c)
    }
    fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        map(a, sigmoid_f)
    }
    fn tanh(&mut self, a: &Tensor) -> Tensor {
        map(a, f64::tanh)
    }
    fn softplus(&mut self, a: &Tensor) -> Tensor {
        map(a, softplus_f)
    }
    fn relu(&mut self, a: &Tensor) -> Tensor {
        map(a, |v| v.max(0.0))
    }
    fn softmax(&mut self, a: &Tensor) -> AdResult<Tensor> {
        softmax_k(a)
    }
    fn circ_conv(&mut self, w: &Tensor, s: &Tensor, offsets: &[i64]) -> AdResult<Tensor> {
        circ_conv_k(w, s, offsets)
    }
    fn pow(&mut self, a: &Tensor, g: &Tensor) -> AdResult<Tensor> {
        pow_k(a, g)
    }
    fn normalize(&mut self, a: &Tensor) -> AdResult<Tensor> {
        normalize_k(a)
    }
    fn concat(&mut self, parts: &[&Tensor]) -> AdResult<Tensor> {
        concat_k(parts)
    }
    fn slice(&mut self, a: &Tensor, start: usize, len: usize) -> AdResult<Tensor> {
        slice_k(a, start, len)
    }
    fn sum(&mut self, a: &Tensor) -> Tensor {
        Tensor::scalar(a.sum())
    }
    fn erase_add(&mut self, mut mem: Tensor, w: &Tensor, e: &Tensor, a: &Tensor) -> AdResult<Tensor> {
        check_erase_add(&mem, w, e, a)?;
        erase_add_in_place(&mut mem, w, e, a);
        Ok(mem)
    }
    fn bce_with_logits(&mut self, logits: &Tensor, targets: &Tensor, mask: &Tensor) -> AdResult<Tensor> {
        bce_k(logits, targets, mask)
    }
}

// ---------------------------------------------------------------------------
// Recording tape.

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatVec(Var, Var),
    MatVecT(Var, Var),
    Affine(Var, Var, Var),
    Outer(Var, Var),
    Dot(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    Softmax(Var),
    CircConv(Var, Var, Vec<i64>),
    Pow(Var, Var),
    Normalize(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    EraseAdd(Var, Var, Var, Var),
    Bce(Var, Tensor, Tensor),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run record of executed operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node on a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's gradient slots.
    /// Frozen parameters receive their contributions too.
    pub fn accumulate_into(&self, store: &mut ParameterStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (acc, v) in store.grad_mut(id).iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize, f: impl Fn(usize) -> f64) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    for (i, s) in slot.iter_mut().enumerate() {
        *s += f(i);
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

    /// Records a leaf whose gradient can be inspected after `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Replays the tape from `loss` back to the first node.
    pub fn backward(&self, loss: Var) -> AdResult<Gradients> {
        let lv = self.val(loss);
        if lv.len() != 1 {
            return Err(AdError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                params.push((i, id));
            }
            grads[i] = Some(g);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatVec(m, x) => self.back_matvec(*m, *x, g, grads),
            Op::Affine(w, b, x) => {
                self.back_matvec(*w, *x, g, grads);
                acc(grads, *b, g.len(), |i| g[i]);
            }
            Op::MatVecT(m, x) => {
                let (mv, xv) = (self.val(*m), self.val(*x));
                let c = mv.cols();
                let (md, xd) = (mv.data(), xv.data());
                let gm = grads[m.0].get_or_insert_with(|| vec![0.0; md.len()]);
                for (i, &xi) in xd.iter().enumerate() {
                    for (s, &gj) in gm[i * c..(i + 1) * c].iter_mut().zip(g) {
                        *s += xi * gj;
                    }
                }
                acc(grads, *x, xd.len(), |i| {
                    md[i * c..(i + 1) * c].iter().zip(g).map(|(a, b)| a * b).sum()
                });
            }
            Op::Outer(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let c = bd.len();
                acc(grads, *a, ad.len(), |i| (0..c).map(|j| g[i * c + j] * bd[j]).sum());
                acc(grads, *b, c, |j| (0..ad.len()).map(|i| g[i * c + j] * ad[i]).sum());
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                acc(grads, *a, ad.len(), |i| g[0] * bd[i]);
                acc(grads, *b, bd.len(), |i| g[0] * ad[i]);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.len(), |i| g[i]);
                acc(grads, *b, g.len(), |i| g[i]);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.len(), |i| g[i]);
                acc(grads, *b, g.len(), |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                acc(grads, *a, g.len(), |i| g[i] * bd[i]);
                acc(grads, *b, g.len(), |i| g[i] * ad[i]);
            }
            Op::AddScalar(a) => acc(grads, *a, g.len(), |i| g[i]),
            Op::Scale(a, c) => acc(grads, *a, g.len(), |i| g[i] * c),
            Op::Sigmoid(a) => acc(grads, *a, g.len(), |i| g[i] * y[i] * (1.0 - y[i])),
            Op::Tanh(a) => acc(grads, *a, g.len(), |i| g[i] * (1.0 - y[i] * y[i])),
            Op::Softplus(a) => {
                let ad = self.val(*a).data();
                acc(grads, *a, g.len(), |i| g[i] * sigmoid_f(ad[i]));
            }
            Op::Relu(a) => {
                let ad = self.val(*a).data();
                acc(grads, *a, g.len(), |i| if ad[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Softmax(a) => {
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(grads, *a, g.len(), |i| y[i] * (g[i] - gy));
            }
            Op::CircConv(w, s, offsets) => {
                let (wd, sd) = (self.val(*w).data(), self.val(*s).data());
                let n = wd.len();
                // grad_w[j] = Σ_k s_k g[(j + o_k) mod n]
                acc(grads, *w, n, |j| {
                    sd.iter().zip(offsets).map(|(&sk, &ok)| sk * g[wrap(j, -ok, n)]).sum()
                });
                acc(grads, *s, sd.len(), |k| {
                    (0..n).map(|i| g[i] * wd[wrap(i, offsets[k], n)]).sum()
                });
            }
            Op::Pow(a, e) => {
                let ad = self.val(*a).data();
                let ev = self.val(*e).item();
                acc(grads, *a, g.len(), |i| {
                    if ad[i] == 0.0 {
                        if ev == 1.0 {
                            g[i]
                        } else {
                            0.0
                        }
                    } else {
                        g[i] * ev * y[i] / ad[i]
                    }
                });
                let ge: f64 = (0..g.len())
                    .filter(|&i| ad[i] > 0.0)
                    .map(|i| g[i] * y[i] * ad[i].ln())
                    .sum();
                acc(grads, *e, 1, |_| ge);
            }
            Op::Normalize(a) => {
                let s = self.val(*a).sum();
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                acc(grads, *a, g.len(), |i| (g[i] - gy) / s);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    acc(grads, *p, n, |i| g[off + i]);
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let n = self.val(*a).len();
                let (lo, hi) = (*start, *start + g.len());
                acc(grads, *a, n, |i| if i >= lo && i < hi { g[i - lo] } else { 0.0 });
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                acc(grads, *a, n, |_| g[0]);
            }
            Op::EraseAdd(m, w, e, a) => {
                let (md, wd) = (self.val(*m).data(), self.val(*w).data());
                let (ed, ad) = (self.val(*e).data(), self.val(*a).data());
                let c = ed.len();
                acc(grads, *m, md.len(), |k| g[k] * (1.0 - wd[k / c] * ed[k % c]));
                acc(grads, *w, wd.len(), |i| {
                    (0..c).map(|j| g[i * c + j] * (ad[j] - md[i * c + j] * ed[j])).sum()
                });
                acc(grads, *e, c, |j| {
                    (0..wd.len()).map(|i| -g[i * c + j] * md[i * c + j] * wd[i]).sum()
                });
                acc(grads, *a, c, |j| (0..wd.len()).map(|i| g[i * c + j] * wd[i]).sum());
            }
            Op::Bce(z, t, mask) => {
                let zd = self.val(*z).data();
                let count = mask.sum();
                let (td, md) = (t.data(), mask.data());
                acc(grads, *z, zd.len(), |i| {
                    g[0] * md[i] * (sigmoid_f(zd[i]) - td[i]) / count
                });
            }
        }
    }

    fn back_matvec(&self, m: Var, x: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (mv, xv) = (self.val(m), self.val(x));
        let c = mv.cols();
        let (md, xd) = (mv.data(), xv.data());
        let gm = grads[m.0].get_or_insert_with(|| vec![0.0; md.len()]);
        for (i, &gi) in g.iter().enumerate() {
            for (s, &xj) in gm[i * c..(i + 1) * c].iter_mut().zip(xd) {
                *s += gi * xj;
            }
        }
        let gx = grads[x.0].get_or_insert_with(|| vec![0.0; c]);
        for (i, &gi) in g.iter().enumerate() {
            for (s, &mij) in gx.iter_mut().zip(&md[i * c..(i + 1) * c]) {
                *s += gi * mij;
            }
        }
    }
}

impl Graph for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }
    fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }
    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }
    fn matvec(&mut self, m: &Var, x: &Var) -> AdResult<Var> {
        let t = matvec_k(self.val(*m), self.val(*x))?;
        Ok(self.push(t, Op::MatVec(*m, *x)))
    }
    fn matvec_t(&mut self, m: &Var, x: &Var) -> AdResult<Var> {
        let t = matvec_t_k(self.val(*m), self.val(*x))?;
        Ok(self.push(t, Op::MatVecT(*m, *x)))
    }
    fn affine(&mut self, w: &Var, b: &Var, x: &Var) -> AdResult<Var> {
        let t = affine_k(self.val(*w), self.val(*b), self.val(*x))?;
        Ok(self.push(t, Op::Affine(*w, *b, *x)))
    }
    fn outer(&mut self, a: &Var, b: &Var) -> AdResult<Var> {
        let t = outer_k(self.val(*a), self.val(*b))?;
        Ok(self.push(t, Op::Outer(*a, *b)))
    }
    fn dot(&mut self, a: &Var, b: &Var) -> AdResult<Var> {
        let p = zip("dot", self.val(*a), self.val(*b), |x, y| x * y)?;
        Ok(self.push(Tensor::scalar(p.sum()), Op::Dot(*a, *b)))
    }
    fn add(&mut self, a: &Var, b: &Var) -> AdResult<Var> {
        let t = zip("add", self.val(*a), self.val(*b), |x, y| x + y)?;
        Ok(self.push(t, Op::Add(*a, *b)))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> AdResult<Var> {
        let t = zip("sub", self.val(*a), self.val(*b), |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(*a, *b)))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> AdResult<Var> {
        let t = zip("mul", self.val(*a), self.val(*b), |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(*a, *b)))
    }
    fn add_scalar(&mut self, a: &Var, c: f64) -> Var {
        let t = map(self.val(*a), |v| v + c);
        self.push(t, Op::AddScalar(*a))
    }
    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let t = map(self.val(*a), |v| v * c);
        self.push(t, Op::Scale(*a, c))
    }
    fn sigmoid(&mut self, a: &Var) -> Var {
        let t = map(self.val(*a), sigmoid_f);
        self.push(t, Op::Sigmoid(*a))
    }
    fn tanh(&mut self, a: &Var) -> Var {
        let t = map(self.val(*a), f64::tanh);
        self.push(t, Op::Tanh(*a))
    }
    fn softplus(&mut self, a: &Var) -> Var {
        let t = map(self.val(*a), softplus_f);
        self.push(t, Op::Softplus(*a))
    }
    fn relu(&mut self, a: &Var) -> Var {
        let t = map(self.val(*a), |v| v.max(0.0));
        self.push(t, Op::Relu(*a))
    }
    fn softmax(&mut self, a: &Var) -> AdResult<Var> {
        let t = softmax_k(self.val(*a))?;
        Ok(self.push(t, Op::Softmax(*a)))
    }
    fn circ_conv(&mut self, w: &Var, s: &Var, offsets: &[i64]) -> AdResult<Var> {
        let t = circ_conv_k(self.val(*w), self.val(*s), offsets)?;
        Ok(self.push(t, Op::CircConv(*w, *s, offsets.to_vec())))
    }
    fn pow(&mut self, a: &Var, g: &Var) -> AdResult<Var> {
        let t = pow_k(self.val(*a), self.val(*g))?;
        Ok(self.push(t, Op::Pow(*a, *g)))
    }
    fn normalize(&mut self, a: &Var) -> AdResult<Var> {
        let t = normalize_k(self.val(*a))?;
        Ok(self.push(t, Op::Normalize(*a)))
    }
    fn concat(&mut self, parts: &[&Var]) -> AdResult<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|v| self.val(**v)).collect();
        let t = concat_k(&ts)?;
        Ok(self.push(t, Op::Concat(parts.iter().map(|v| **v).collect())))
    }
    fn slice(&mut self, a: &Var, start: usize, len: usize) -> AdResult<Var> {
        let t = slice_k(self.val(*a), start, len)?;
        Ok(self.push(t, Op::Slice(*a, start)))
    }
    fn sum(&mut self, a: &Var) -> Var {
        let t = Tensor::scalar(self.val(*a).sum());
        self.push(t, Op::Sum(*a))
    }
    fn erase_add(&mut self, mem: Var, w: &Var, e: &Var, a: &Var) -> AdResult<Var> {
        let (mv, wv, ev, av) = (self.val(mem), self.val(*w), self.val(*e), self.val(*a));
        check_erase_add(mv, wv, ev, av)?;
        let mut out = mv.clone();
        erase_add_in_place(&mut out, wv, ev, av);
        Ok(self.push(out, Op::EraseAdd(mem, *w, *e, *a)))
    }
    fn bce_with_logits(&mut self, logits: &Var, targets: &Tensor, mask: &Tensor) -> AdResult<Var> {
        let t = bce_k(self.val(*logits), targets, mask)?;
        Ok(self.push(t, Op::Bce(*logits, targets.clone(), mask.clone())))
    }
}
