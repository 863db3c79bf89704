//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is a topological order
//! by construction and the backward sweep is a single reverse pass.

use std::cell::{Ref, RefCell};

use crate::nn::kernels::{dot, matmul, matmul_at_acc, matmul_bt};
use crate::nn::{NnError, Tensor};
use crate::scalar::Real;

/// Sentinel gather index producing a zero.
pub const ZERO_INDEX: usize = usize::MAX;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
/// Argument bound used for the derivative of `asin`/`acos` near ±1.
pub const TRIG_GRAD_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub enum Unary<T> {
    Neg,
    Square,
    /// `sqrt(max(x, 0))` with a zero subgradient at 0.
    SafeSqrt,
    Exp,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
    /// `asin(clamp(x, −1, 1))`; derivative evaluated at `x` pulled into `[−1+1e-7, 1−1e-7]`.
    Asin,
    /// `acos(clamp(x, −1, 1))`; derivative as for `Asin`.
    Acos,
    /// Huber with threshold `delta`: `0.5 x²/δ` inside, `|x| − δ/2` outside.
    SmoothL1(T),
}

#[derive(Debug, Clone)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Per-row validity; invalid rows are excluded as keys.
    pub key_valid: Vec<bool>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    SubCol(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(usize, Unary<T>),
    MatMul(usize, usize),
    BatchMatMul { a: usize, b: usize, m: usize, k: usize, p: usize },
    SumAll(usize),
    SumRows(usize),
    Gather { src: usize, index: Vec<usize> },
    Concat(Vec<usize>),
    Reshape(usize),
    LayerNorm { x: usize, inv_std: Vec<T> },
    Rope { x: usize, heads: usize, cos: Vec<T>, sin: Vec<T> },
    Attention { q: usize, k: usize, v: usize, layout: AttnLayout, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients indexed by tape node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Leaf node; gradients flow into it but not beyond.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values that are not trained.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value)
    }

    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.leaf(Tensor::scalar(v))
    }

    fn val(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>, NnError> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(NnError::NonScalarLoss(nodes[loss.id].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let lv = &nodes[loss.id].value;
        grads[loss.id] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Grads { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_with<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    shape: &[usize],
    f: impl FnOnce(&mut [T]),
) {
    let slot = &mut grads[id];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(slot.as_mut().expect("initialised").data_mut());
}

fn backprop<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<(), NnError> {
    let val = |id: usize| &nodes[id].value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            let neg = Tensor::from_fn(g.shape(), |i| -gd[i]);
            accumulate(grads, *b, neg);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(grads, *a, Tensor::from_fn(g.shape(), |i| gd[i] * bv[i]));
            accumulate(grads, *b, Tensor::from_fn(g.shape(), |i| gd[i] * av[i]));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(grads, *a, Tensor::from_fn(g.shape(), |i| gd[i] / bv[i]));
            accumulate(grads, *b, Tensor::from_fn(g.shape(), |i| -gd[i] * av[i] / (bv[i] * bv[i])));
        }
        Op::AddRow(x, r) => {
            accumulate(grads, *x, g.clone());
            let m = g.cols();
            let rshape = val(*r).shape().to_vec();
            accumulate_with(grads, *r, &rshape, |acc| {
                for row in gd.chunks(m) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += *v;
                    }
                }
            });
        }
        Op::MulRow(x, r) => {
            let (xv, rv) = (val(*x).data(), val(*r).data());
            let m = g.cols();
            accumulate(grads, *x, Tensor::from_fn(g.shape(), |i| gd[i] * rv[i % m]));
            let rshape = val(*r).shape().to_vec();
            accumulate_with(grads, *r, &rshape, |acc| {
                for (i, v) in gd.iter().enumerate() {
                    acc[i % m] += *v * xv[i];
                }
            });
        }
        Op::AddCol(x, c) | Op::SubCol(x, c) => {
            let sign = if matches!(node.op, Op::SubCol(..)) { -T::one() } else { T::one() };
            accumulate(grads, *x, g.clone());
            let m = g.cols();
            let cshape = val(*c).shape().to_vec();
            accumulate_with(grads, *c, &cshape, |acc| {
                for (r, row) in gd.chunks(m).enumerate() {
                    acc[r] += sign * row.iter().copied().sum::<T>();
                }
            });
        }
        Op::MulCol(x, c) => {
            let (xv, cv) = (val(*x).data(), val(*c).data());
            let m = g.cols();
            accumulate(grads, *x, Tensor::from_fn(g.shape(), |i| gd[i] * cv[i / m]));
            let cshape = val(*c).shape().to_vec();
            accumulate_with(grads, *c, &cshape, |acc| {
                for (i, v) in gd.iter().enumerate() {
                    acc[i / m] += *v * xv[i];
                }
            });
        }
        Op::DivCol(x, c) => {
            let (xv, cv) = (val(*x).data(), val(*c).data());
            let m = g.cols();
            accumulate(grads, *x, Tensor::from_fn(g.shape(), |i| gd[i] / cv[i / m]));
            let cshape = val(*c).shape().to_vec();
            accumulate_with(grads, *c, &cshape, |acc| {
                for (i, v) in gd.iter().enumerate() {
                    let cr = cv[i / m];
                    acc[i / m] += -*v * xv[i] / (cr * cr);
                }
            });
        }
        Op::Scale(x, s) => {
            accumulate(grads, *x, Tensor::from_fn(g.shape(), |i| gd[i] * *s));
        }
        Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
        Op::Unary(x, kind) => {
            let xv = val(*x).data();
            let yv = node.value.data();
            let d = Tensor::from_fn(g.shape(), |i| gd[i] * unary_grad(*kind, xv[i], yv[i]));
            accumulate(grads, *x, d);
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, k) = (av.rows(), av.cols());
            let m = bv.cols();
            let da = matmul_bt(gd, bv.data(), n, m, k);
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            let bshape = bv.shape().to_vec();
            accumulate_with(grads, *b, &bshape, |acc| matmul_at_acc(av.data(), gd, n, k, m, acc));
        }
        Op::BatchMatMul { a, b, m, k, p } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, p) = (*m, *k, *p);
            let rows = av.rows();
            let mut da = vec![T::zero(); av.numel()];
            let mut db = vec![T::zero(); bv.numel()];
            for r in 0..rows {
                let ar = &av.data()[r * m * k..(r + 1) * m * k];
                let br = &bv.data()[r * k * p..(r + 1) * k * p];
                let gr = &gd[r * m * p..(r + 1) * m * p];
                for i in 0..m {
                    for j in 0..p {
                        let gij = gr[i * p + j];
                        for l in 0..k {
                            da[r * m * k + i * k + l] += gij * br[l * p + j];
                            db[r * k * p + l * p + j] += gij * ar[i * k + l];
                        }
                    }
                }
            }
            accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
        }
        Op::SumAll(x) => {
            let s = gd[0];
            accumulate(grads, *x, Tensor::full(val(*x).shape(), s));
        }
        Op::SumRows(x) => {
            let xv = val(*x);
            let m = xv.cols();
            accumulate(grads, *x, Tensor::from_fn(xv.shape(), |i| gd[i / m]));
        }
        Op::Gather { src, index } => {
            let sshape = val(*src).shape().to_vec();
            accumulate_with(grads, *src, &sshape, |acc| {
                for (o, &ix) in index.iter().enumerate() {
                    if ix != ZERO_INDEX {
                        acc[ix] += gd[o];
                    }
                }
            });
        }
        Op::Concat(parts) => {
            let total = g.cols();
            let rows = g.rows();
            let mut off = 0;
            for &p in parts {
                let pv = val(p);
                let c = pv.cols();
                let mut d = vec![T::zero(); pv.numel()];
                for r in 0..rows {
                    d[r * c..(r + 1) * c].copy_from_slice(&gd[r * total + off..r * total + off + c]);
                }
                accumulate(grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                off += c;
            }
        }
        Op::Reshape(x) => {
            let xs = val(*x).shape().to_vec();
            accumulate(grads, *x, g.clone().reshaped(xs)?);
        }
        Op::LayerNorm { x, inv_std } => {
            let y = node.value.data();
            let m = g.cols();
            let mf = T::lit(m as f64);
            let mut dx = vec![T::zero(); y.len()];
            for (r, istd) in inv_std.iter().enumerate() {
                let gy = &gd[r * m..(r + 1) * m];
                let yr = &y[r * m..(r + 1) * m];
                let mean_g = gy.iter().copied().sum::<T>() / mf;
                let mean_gy = dot(gy, yr) / mf;
                for c in 0..m {
                    dx[r * m + c] = *istd * (gy[c] - mean_g - yr[c] * mean_gy);
                }
            }
            accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
        }
        Op::Rope { x, heads, cos, sin } => {
            let d = g.cols();
            let half = d / heads / 2;
            let mut dx = vec![T::zero(); gd.len()];
            for r in 0..g.rows() {
                for h in 0..*heads {
                    for i in 0..half {
                        let c0 = r * d + h * 2 * half + 2 * i;
                        let (c, s) = (cos[r * half + i], sin[r * half + i]);
                        let (g0, g1) = (gd[c0], gd[c0 + 1]);
                        dx[c0] = g0 * c + g1 * s;
                        dx[c0 + 1] = -g0 * s + g1 * c;
                    }
                }
            }
            accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
        }
        Op::Attention { q, k, v, layout, probs } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (dq, dk, dv) = attention_backward(qv.data(), kv.data(), vv.data(), gd, layout, probs, qv.cols());
            accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), dq)?);
            accumulate(grads, *k, Tensor::new(kv.shape().to_vec(), dk)?);
            accumulate(grads, *v, Tensor::new(vv.shape().to_vec(), dv)?);
        }
    }
    Ok(())
}

fn unary_value<T: Real>(kind: Unary<T>, x: T) -> T {
    let one = T::one();
    let half = T::lit(0.5);
    match kind {
        Unary::Neg => -x,
        Unary::Square => x * x,
        Unary::SafeSqrt => x.max(T::zero()).sqrt(),
        Unary::Exp => x.exp(),
        Unary::Tanh => x.tanh(),
        Unary::Gelu => {
            let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
            half * x * (one + u.tanh())
        }
        Unary::Asin => x.max(-one).min(one).asin(),
        Unary::Acos => x.max(-one).min(one).acos(),
        Unary::SmoothL1(delta) => {
            let a = x.abs();
            if a < delta {
                half * x * x / delta
            } else {
                a - half * delta
            }
        }
    }
}

fn unary_grad<T: Real>(kind: Unary<T>, x: T, y: T) -> T {
    let one = T::one();
    let half = T::lit(0.5);
    let bound = one - T::lit(TRIG_GRAD_CLAMP);
    match kind {
        Unary::Neg => -one,
        Unary::Square => x + x,
        Unary::SafeSqrt => {
            if y > T::zero() {
                half / y
            } else {
                T::zero()
            }
        }
        Unary::Exp => y,
        Unary::Tanh => one - y * y,
        Unary::Gelu => {
            let c = T::lit(GELU_C);
            let a = T::lit(GELU_A);
            let u = c * (x + a * x * x * x);
            let th = u.tanh();
            half * (one + th) + half * x * (one - th * th) * c * (one + T::lit(3.0) * a * x * x)
        }
        Unary::Asin | Unary::Acos => {
            let xc = x.max(-bound).min(bound);
            let d = one / (one - xc * xc).sqrt();
            if matches!(kind, Unary::Asin) {
                d
            } else {
                -d
            }
        }
        Unary::SmoothL1(delta) => {
            if x.abs() < delta {
                x / delta
            } else {
                x.signum()
            }
        }
    }
}

fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], layout: &AttnLayout, d: usize) -> (Vec<T>, Vec<T>) {
    let (b, n, h) = (layout.batch, layout.seq, layout.heads);
    let dh = d / h;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); b * n * d];
    let mut probs = vec![T::zero(); b * h * n * n];
    let mut qh = vec![T::zero(); n * dh];
    let mut kh = vec![T::zero(); n * dh];
    let mut vh = vec![T::zero(); n * dh];
    for bi in 0..b {
        for hi in 0..h {
            for t in 0..n {
                let src = (bi * n + t) * d + hi * dh;
                qh[t * dh..(t + 1) * dh].copy_from_slice(&q[src..src + dh]);
                kh[t * dh..(t + 1) * dh].copy_from_slice(&k[src..src + dh]);
                vh[t * dh..(t + 1) * dh].copy_from_slice(&v[src..src + dh]);
            }
            let scores = matmul_bt(&qh, &kh, n, dh, n);
            let pbase = (bi * h + hi) * n * n;
            for i in 0..n {
                let row = &scores[i * n..(i + 1) * n];
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    if layout.key_valid[bi * n + j] {
                        mx = mx.max(row[j] * scale);
                    }
                }
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut z = T::zero();
                let pr = &mut probs[pbase + i * n..pbase + (i + 1) * n];
                for j in 0..n {
                    if layout.key_valid[bi * n + j] {
                        let e = (row[j] * scale - mx).exp();
                        pr[j] = e;
                        z += e;
                    }
                }
                for p in pr.iter_mut() {
                    *p /= z;
                }
            }
            let o = matmul(&probs[pbase..pbase + n * n], &vh, n, n, dh);
            for t in 0..n {
                let dst = (bi * n + t) * d + hi * dh;
                out[dst..dst + dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    layout: &AttnLayout,
    probs: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, n, h) = (layout.batch, layout.seq, layout.heads);
    let dh = d / h;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut qh = vec![T::zero(); n * dh];
    let mut kh = vec![T::zero(); n * dh];
    let mut vh = vec![T::zero(); n * dh];
    let mut gh = vec![T::zero(); n * dh];
    for bi in 0..b {
        for hi in 0..h {
            for t in 0..n {
                let src = (bi * n + t) * d + hi * dh;
                qh[t * dh..(t + 1) * dh].copy_from_slice(&q[src..src + dh]);
                kh[t * dh..(t + 1) * dh].copy_from_slice(&k[src..src + dh]);
                vh[t * dh..(t + 1) * dh].copy_from_slice(&v[src..src + dh]);
                gh[t * dh..(t + 1) * dh].copy_from_slice(&g[src..src + dh]);
            }
            let pbase = (bi * h + hi) * n * n;
            let p = &probs[pbase..pbase + n * n];
            // dV = Pᵀ dO
            let mut dvh = vec![T::zero(); n * dh];
            matmul_at_acc(p, &gh, n, n, dh, &mut dvh);
            // dP = dO Vᵀ ; dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let dp = matmul_bt(&gh, &vh, n, dh, n);
            let mut ds = vec![T::zero(); n * n];
            for i in 0..n {
                let pr = &p[i * n..(i + 1) * n];
                let dpr = &dp[i * n..(i + 1) * n];
                let s = dot(pr, dpr);
                for j in 0..n {
                    ds[i * n + j] = pr[j] * (dpr[j] - s) * scale;
                }
            }
            let dqh = matmul(&ds, &kh, n, n, dh);
            let mut dkh = vec![T::zero(); n * dh];
            matmul_at_acc(&ds, &qh, n, n, dh, &mut dkh);
            for t in 0..n {
                let dst = (bi * n + t) * d + hi * dh;
                dq[dst..dst + dh].copy_from_slice(&dqh[t * dh..(t + 1) * dh]);
                dk[dst..dst + dh].copy_from_slice(&dkh[t * dh..(t + 1) * dh]);
                dv[dst..dst + dh].copy_from_slice(&dvh[t * dh..(t + 1) * dh]);
            }
        }
    }
    (dq, dk, dv)
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.val(self.id)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    fn binary(self, other: Var<'t, T>, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'t, T> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape(&a, &b, name);
            Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
        };
        self.tape.push(out, op)
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// `x[n,m] + r[m]` broadcast over rows.
    pub fn add_row(self, r: Var<'t, T>) -> Var<'t, T> {
        let out = {
            let (x, rv) = (self.value(), r.value());
            let m = x.cols();
            assert_eq!(rv.numel(), m, "add_row: width mismatch");
            Tensor::from_fn(x.shape(), |i| x.data()[i] + rv.data()[i % m])
        };
        self.tape.push(out, Op::AddRow(self.id, r.id))
    }

    /// `x[n,m] * r[m]` broadcast over rows.
    pub fn mul_row(self, r: Var<'t, T>) -> Var<'t, T> {
        let out = {
            let (x, rv) = (self.value(), r.value());
            let m = x.cols();
            assert_eq!(rv.numel(), m, "mul_row: width mismatch");
            Tensor::from_fn(x.shape(), |i| x.data()[i] * rv.data()[i % m])
        };
        self.tape.push(out, Op::MulRow(self.id, r.id))
    }

    fn col_op(self, c: Var<'t, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Var<'t, T> {
        let out = {
            let (x, cv) = (self.value(), c.value());
            let m = x.cols();
            assert_eq!(cv.numel(), x.rows(), "column broadcast: row count mismatch");
            Tensor::from_fn(x.shape(), |i| f(x.data()[i], cv.data()[i / m]))
        };
        self.tape.push(out, op)
    }

    pub fn add_col(self, c: Var<'t, T>) -> Var<'t, T> {
        self.col_op(c, |a, b| a + b, Op::AddCol(self.id, c.id))
    }

    pub fn sub_col(self, c: Var<'t, T>) -> Var<'t, T> {
        self.col_op(c, |a, b| a - b, Op::SubCol(self.id, c.id))
    }

    pub fn mul_col(self, c: Var<'t, T>) -> Var<'t, T> {
        self.col_op(c, |a, b| a * b, Op::MulCol(self.id, c.id))
    }

    pub fn div_col(self, c: Var<'t, T>) -> Var<'t, T> {
        self.col_op(c, |a, b| a / b, Op::DivCol(self.id, c.id))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = {
            let x = self.value();
            Tensor::from_fn(x.shape(), |i| x.data()[i] * s)
        };
        self.tape.push(out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let out = {
            let x = self.value();
            Tensor::from_fn(x.shape(), |i| x.data()[i] + s)
        };
        self.tape.push(out, Op::AddScalar(self.id))
    }

    pub fn unary(self, kind: Unary<T>) -> Var<'t, T> {
        let out = {
            let x = self.value();
            Tensor::from_fn(x.shape(), |i| unary_value(kind, x.data()[i]))
        };
        self.tape.push(out, Op::Unary(self.id, kind))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(Unary::Neg)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Unary::Square)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(Unary::SafeSqrt)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Unary::Tanh)
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Unary::Gelu)
    }

    pub fn asin(self) -> Var<'t, T> {
        self.unary(Unary::Asin)
    }

    pub fn acos(self) -> Var<'t, T> {
        self.unary(Unary::Acos)
    }

    pub fn smooth_l1(self, delta: T) -> Var<'t, T> {
        self.unary(Unary::SmoothL1(delta))
    }

    /// `a[n,k] · b[k,m]`
    pub fn matmul(self, b: Var<'t, T>) -> Var<'t, T> {
        let out = {
            let (av, bv) = (self.value(), b.value());
            let (n, k) = (av.rows(), av.cols());
            assert_eq!(bv.rows(), k, "matmul: inner dimension mismatch");
            assert_eq!(bv.shape().len(), 2, "matmul: rhs must be 2D");
            let m = bv.cols();
            let mut shape = av.shape().to_vec();
            *shape.last_mut().expect("non-empty shape") = m;
            Tensor::new(shape, matmul(av.data(), bv.data(), n, k, m)).expect("matmul shape")
        };
        self.tape.push(out, Op::MatMul(self.id, b.id))
    }

    /// Row-wise small matrix products: each row of `self` is an `m×k`
    /// matrix, each row of `b` a `k×p` matrix (both row-major).
    pub fn batch_matmul(self, b: Var<'t, T>, m: usize, k: usize, p: usize) -> Var<'t, T> {
        let out = {
            let (av, bv) = (self.value(), b.value());
            assert_eq!(av.cols(), m * k, "batch_matmul: lhs width");
            assert_eq!(bv.cols(), k * p, "batch_matmul: rhs width");
            assert_eq!(av.rows(), bv.rows(), "batch_matmul: batch mismatch");
            let rows = av.rows();
            let mut o = vec![T::zero(); rows * m * p];
            for r in 0..rows {
                let ar = &av.data()[r * m * k..(r + 1) * m * k];
                let br = &bv.data()[r * k * p..(r + 1) * k * p];
                for i in 0..m {
                    for j in 0..p {
                        let mut s = T::zero();
                        for l in 0..k {
                            s += ar[i * k + l] * br[l * p + j];
                        }
                        o[r * m * p + i * p + j] = s;
                    }
                }
            }
            Tensor::matrix(rows, m * p, o).expect("batch_matmul shape")
        };
        self.tape.push(out, Op::BatchMatMul { a: self.id, b: b.id, m, k, p })
    }

    pub fn sum(self) -> Var<'t, T> {
        let out = Tensor::scalar(self.value().data().iter().copied().sum());
        self.tape.push(out, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(T::one() / T::lit(n as f64))
    }

    /// Sum over the last axis: `[n,m] → [n,1]`.
    pub fn sum_rows(self) -> Var<'t, T> {
        let out = {
            let x = self.value();
            let m = x.cols();
            let d: Vec<T> = x.data().chunks(m).map(|r| r.iter().copied().sum()).collect();
            Tensor::matrix(x.rows(), 1, d).expect("sum_rows shape")
        };
        self.tape.push(out, Op::SumRows(self.id))
    }

    /// Flat gather: `out[i] = self[index[i]]`, or zero for [`ZERO_INDEX`].
    pub fn gather(self, index: Vec<usize>, shape: Vec<usize>) -> Var<'t, T> {
        let out = {
            let x = self.value();
            let d: Vec<T> = index.iter().map(|&i| if i == ZERO_INDEX { T::zero() } else { x.data()[i] }).collect();
            Tensor::new(shape, d).expect("gather shape")
        };
        self.tape.push(out, Op::Gather { src: self.id, index })
    }

    /// Column slice `[.., start..end]` of a 2D view.
    pub fn cols_slice(self, start: usize, end: usize) -> Var<'t, T> {
        let (rows, cols) = (self.rows(), self.cols());
        assert!(start <= end && end <= cols, "cols_slice out of range");
        let w = end - start;
        let index = (0..rows).flat_map(|r| (start..end).map(move |c| r * cols + c)).collect();
        self.gather(index, vec![rows, w])
    }

    /// Rows selected by index (with [`ZERO_INDEX`] giving a zero row).
    pub fn select_rows(self, rows: &[usize]) -> Var<'t, T> {
        let cols = self.cols();
        let index = rows
            .iter()
            .flat_map(|&r| (0..cols).map(move |c| if r == ZERO_INDEX { ZERO_INDEX } else { r * cols + c }))
            .collect();
        self.gather(index, vec![rows.len(), cols])
    }

    pub fn transpose(self) -> Var<'t, T> {
        let (rows, cols) = (self.rows(), self.cols());
        let index = (0..cols).flat_map(|c| (0..rows).map(move |r| r * cols + c)).collect();
        self.gather(index, vec![cols, rows])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t, T> {
        let out = self.to_tensor().reshaped(shape).expect("reshape");
        self.tape.push(out, Op::Reshape(self.id))
    }

    /// Straight-through substitution: the value becomes `value`, the gradient
    /// passes to `self` unchanged.
    pub fn substitute(self, value: Tensor<T>) -> Var<'t, T> {
        assert_eq!(value.shape(), self.value().shape(), "substitute: shape mismatch");
        self.tape.push(value, Op::Reshape(self.id))
    }

    /// Stop-gradient: a fresh leaf holding the current value.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.leaf(self.to_tensor())
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let rows = vals[0].rows();
            assert!(vals.iter().all(|v| v.rows() == rows), "concat_cols: row mismatch");
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut d = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    d.extend_from_slice(v.row(r));
                }
            }
            Tensor::matrix(rows, total, d).expect("concat shape")
        };
        tape.push(out, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }

    /// Normalization of the last axis without affine: `(x − μ)/√(σ² + eps)`.
    pub fn layer_norm_plain(self, eps: T) -> Var<'t, T> {
        let (out, inv_std) = {
            let x = self.value();
            let m = x.cols();
            let mf = T::lit(m as f64);
            let mut y = vec![T::zero(); x.numel()];
            let mut inv = Vec::with_capacity(x.rows());
            for (r, row) in x.data().chunks(m).enumerate() {
                let mean = row.iter().copied().sum::<T>() / mf;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / mf;
                let is = T::one() / (var + eps).sqrt();
                for c in 0..m {
                    y[r * m + c] = (row[c] - mean) * is;
                }
                inv.push(is);
            }
            (Tensor::new(x.shape().to_vec(), y).expect("ln shape"), inv)
        };
        self.tape.push(out, Op::LayerNorm { x: self.id, inv_std })
    }

    /// Rotary embedding per head: channel pairs `(2i, 2i+1)` rotated by
    /// `position · base^(−2i/head_dim)`.
    pub fn rope(self, positions: &[usize], heads: usize, base: f64) -> Var<'t, T> {
        let (rows, d) = (self.rows(), self.cols());
        assert_eq!(positions.len(), rows, "rope: one position per row");
        let dh = d / heads;
        assert!(dh.is_multiple_of(2), "rope: odd head dim");
        let half = dh / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let freq = base.powf(-(2.0 * i as f64) / dh as f64);
                let (s, c) = (p as f64 * freq).sin_cos();
                cos.push(T::lit(c));
                sin.push(T::lit(s));
            }
        }
        let out = {
            let x = self.value();
            let xd = x.data();
            let mut y = xd.to_vec();
            for r in 0..rows {
                for h in 0..heads {
                    for i in 0..half {
                        let c0 = r * d + h * dh + 2 * i;
                        let (c, s) = (cos[r * half + i], sin[r * half + i]);
                        y[c0] = xd[c0] * c - xd[c0 + 1] * s;
                        y[c0 + 1] = xd[c0] * s + xd[c0 + 1] * c;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), y).expect("rope shape")
        };
        self.tape.push(out, Op::Rope { x: self.id, heads, cos, sin })
    }

    /// Multi-head scaled dot-product attention over `[batch·seq, d]` rows.
    pub fn attention(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, layout: AttnLayout) -> Var<'t, T> {
        let (out, probs) = {
            let (qv, kv, vv) = (q.value(), k.value(), v.value());
            assert_eq!(qv.shape(), kv.shape(), "attention: q/k shape");
            assert_eq!(qv.shape(), vv.shape(), "attention: q/v shape");
            assert_eq!(qv.rows(), layout.batch * layout.seq, "attention: layout rows");
            assert_eq!(layout.key_valid.len(), qv.rows(), "attention: mask length");
            let d = qv.cols();
            let (o, p) = attention_forward(qv.data(), kv.data(), vv.data(), &layout, d);
            (Tensor::new(qv.shape().to_vec(), o).expect("attention shape"), p)
        };
        q.tape.push(out, Op::Attention { q: q.id, k: k.id, v: v.id, layout, probs })
    }
}
