use crate::error::{CmtrError, Result};
use crate::numerics::attention::AttnDims;
use crate::numerics::broadcast::{for_each_pair, IndexMap};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum UnaryKind<T> {
    Neg,
    Scale(T),
    AddScalar(T),
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Relu,
    Gelu,
    Softplus,
    ClampMin(T),
    SmoothL1(T),
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var, map_a: IndexMap, map_b: IndexMap },
    Unary { kind: UnaryKind<T>, x: Var },
    /// `[.., M, K] x [K, N]`
    MatMul { a: Var, b: Var, rows: usize, k: usize, n: usize },
    /// `[G, M, K] x [G, K, N]`, or `[G, N, K]` read transposed.
    Bmm { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, outer: usize, inner: usize, lens: Vec<usize> },
    Slice { x: Var, outer: usize, inner: usize, axis_len: usize, start: usize, len: usize },
    IndexSelect { x: Var, indices: Vec<usize>, row: usize },
    BroadcastTo { x: Var, map: IndexMap },
    Sum { x: Var, outer: usize, n: usize, inner: usize },
    Mean { x: Var, outer: usize, n: usize, inner: usize },
    Softmax { x: Var, outer: usize, n: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, n: usize, inner: usize },
    MaskedSoftmax { x: Var, mask: Vec<bool>, n: usize },
    LayerNorm { x: Var, outer: usize, n: usize, inner: usize, inv_std: Vec<T> },
    Attention { qkv: Var, dims: AttnDims, probs: Vec<T>, scale: T },
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Record of executed operations for reverse-mode differentiation.
///
/// Values are computed eagerly as ops are recorded. [`Tape::backward`] walks
/// the record in exact reverse order and may only run once per tape.
pub struct Tape<T: Scalar = f64> {
    pub(crate) nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `tensor` as an input. Gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Input that always receives a gradient.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let mut t = tensor.clone();
        t.requires_grad = true;
        self.leaf(t)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(CmtrError::Tape("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(CmtrError::shape("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.requires_grad(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, map_a, map_b } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        let sign = if *kind == BinaryKind::Sub { -T::one() } else { T::one() };
                        self.accumulate(grads, *a, |ga| scatter(ga, g, map_a, T::one()));
                        self.accumulate(grads, *b, |gb| scatter(gb, g, map_b, sign));
                    }
                    BinaryKind::Mul => {
                        self.accumulate(grads, *a, |ga| {
                            for_each_pair(map_a, map_b, g.len(), |i, ia, ib| ga[ia] = ga[ia] + g[i] * bv[ib])
                        });
                        self.accumulate(grads, *b, |gb| {
                            for_each_pair(map_a, map_b, g.len(), |i, ia, ib| gb[ib] = gb[ib] + g[i] * av[ia])
                        });
                    }
                    BinaryKind::Div => {
                        self.accumulate(grads, *a, |ga| {
                            for_each_pair(map_a, map_b, g.len(), |i, ia, ib| ga[ia] = ga[ia] + g[i] / bv[ib])
                        });
                        self.accumulate(grads, *b, |gb| {
                            map_b.for_each(g.len(), |i, ib| gb[ib] = gb[ib] - g[i] * y[i] / bv[ib])
                        });
                    }
                }
            }
            Op::Unary { kind, x } => {
                let xv = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + g[i] * unary_derivative(*kind, xv[i], y[i]);
                    }
                });
            }
            Op::MatMul { a, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    // ga += g [rows,n] @ b^T [n,k]
                    T::gemm(rows, n, k, T::one(), g, (n as isize, 1), bv, (1, n as isize), T::one(), ga, (k as isize, 1));
                });
                self.accumulate(grads, *b, |gb| {
                    // gb += a^T [k,rows] @ g [rows,n]
                    T::gemm(k, rows, n, T::one(), av, (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                });
            }
            Op::Bmm { a, b, g: groups, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.data(*a), self.data(*b));
                // b element (p, j) of the logical [K, N] operand lives at bs.0*p + bs.1*j
                let bs: (isize, isize) = if *trans_b { (1, k as isize) } else { (n as isize, 1) };
                self.accumulate(grads, *a, |ga| {
                    for gi in 0..*groups {
                        let gsl = &g[gi * m * n..(gi + 1) * m * n];
                        let bsl = &bv[gi * k * n..(gi + 1) * k * n];
                        T::gemm(m, n, k, T::one(), gsl, (n as isize, 1), bsl, (bs.1, bs.0), T::one(),
                            &mut ga[gi * m * k..(gi + 1) * m * k], (k as isize, 1));
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for gi in 0..*groups {
                        let gsl = &g[gi * m * n..(gi + 1) * m * n];
                        let asl = &av[gi * m * k..(gi + 1) * m * k];
                        // d(logical b) = a^T g, written through the same layout as b
                        T::gemm(k, m, n, T::one(), asl, (1, k as isize), gsl, (n as isize, 1), T::one(),
                            &mut gb[gi * k * n..(gi + 1) * k * n], bs);
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
            }
            Op::Permute { x, perm } => {
                let src_shape = self.shape(*x).to_vec();
                let map = permute_map(&src_shape, perm);
                self.accumulate(grads, *x, |gx| {
                    for (o, &s) in map.iter().enumerate() {
                        gx[s] = gx[s] + g[o];
                    }
                });
            }
            Op::Concat { xs, outer, inner, lens } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (x, &len) in xs.iter().zip(lens) {
                    let chunk = len * inner;
                    self.accumulate(grads, *x, |gx| {
                        for o in 0..*outer {
                            let src = &g[o * total * inner + offset * inner..][..chunk];
                            add_into(&mut gx[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, outer, inner, axis_len, start, len } => {
                let chunk = len * inner;
                self.accumulate(grads, *x, |gx| {
                    for o in 0..*outer {
                        let dst = &mut gx[o * axis_len * inner + start * inner..][..chunk];
                        add_into(dst, &g[o * chunk..(o + 1) * chunk]);
                    }
                });
            }
            Op::IndexSelect { x, indices, row } => {
                self.accumulate(grads, *x, |gx| {
                    for (r, &src) in indices.iter().enumerate() {
                        add_into(&mut gx[src * row..(src + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                });
            }
            Op::BroadcastTo { x, map } => {
                self.accumulate(grads, *x, |gx| scatter(gx, g, map, T::one()));
            }
            Op::Sum { x, outer, n, inner } | Op::Mean { x, outer, n, inner } => {
                let scale = match node.op {
                    Op::Mean { .. } => T::one() / T::of(*n as f64),
                    _ => T::one(),
                };
                self.accumulate(grads, *x, |gx| {
                    for o in 0..*outer {
                        for j in 0..*n {
                            for i in 0..*inner {
                                let d = &mut gx[(o * n + j) * inner + i];
                                *d = *d + g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                self.accumulate(grads, *x, |gx| {
                    for_each_lane(*outer, *n, *inner, |lane| {
                        let dot = lane.clone().map(|p| g[p] * y[p]).fold(T::zero(), |s, v| s + v);
                        for p in lane {
                            gx[p] = gx[p] + y[p] * (g[p] - dot);
                        }
                    });
                });
            }
            Op::LogSoftmax { x, outer, n, inner } => {
                self.accumulate(grads, *x, |gx| {
                    for_each_lane(*outer, *n, *inner, |lane| {
                        let gsum = lane.clone().map(|p| g[p]).fold(T::zero(), |s, v| s + v);
                        for p in lane {
                            gx[p] = gx[p] + g[p] - y[p].exp() * gsum;
                        }
                    });
                });
            }
            Op::MaskedSoftmax { x, mask, n } => {
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.len() / n {
                        let lane = r * n..(r + 1) * n;
                        let dot = lane.clone().filter(|&p| mask[p]).map(|p| g[p] * y[p]).fold(T::zero(), |s, v| s + v);
                        for p in lane.filter(|&p| mask[p]) {
                            gx[p] = gx[p] + y[p] * (g[p] - dot);
                        }
                    }
                });
            }
            Op::Attention { qkv, dims, probs, scale } => {
                self.accumulate(grads, *qkv, |gx| self.attention_backward(*qkv, *dims, probs, *scale, g, gx));
            }
            Op::LayerNorm { x, outer, n, inner, inv_std } => {
                let nf = T::of(*n as f64);
                self.accumulate(grads, *x, |gx| {
                    let mut lane_id = 0;
                    for_each_lane(*outer, *n, *inner, |lane| {
                        let gm = lane.clone().map(|p| g[p]).fold(T::zero(), |s, v| s + v) / nf;
                        let gym = lane.clone().map(|p| g[p] * y[p]).fold(T::zero(), |s, v| s + v) / nf;
                        let is = inv_std[lane_id];
                        for p in lane {
                            gx[p] = gx[p] + is * (g[p] - gm - y[p] * gym);
                        }
                        lane_id += 1;
                    });
                });
            }
        }
    }
}

/// Iterates lanes of length `n` along the middle axis of an
/// `[outer, n, inner]` view, in fixed order.
pub(crate) fn for_each_lane(
    outer: usize,
    n: usize,
    inner: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn scatter<T: Scalar>(dst: &mut [T], g: &[T], map: &IndexMap, sign: T) {
    map.for_each(g.len(), |i, j| dst[j] = dst[j] + sign * g[i]);
}

/// Source flat index for every output position of a permutation.
pub(crate) fn permute_map(src_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = src_shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    T::of(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn smooth_l1<T: Scalar>(x: T, beta: T) -> T {
    let ax = x.abs();
    if ax < beta {
        T::of(0.5) * x * x / beta
    } else {
        ax - T::of(0.5) * beta
    }
}

fn unary_derivative<T: Scalar>(kind: UnaryKind<T>, x: T, y: T) -> T {
    match kind {
        UnaryKind::Neg => -T::one(),
        UnaryKind::Scale(c) => c,
        UnaryKind::AddScalar(_) => T::one(),
        UnaryKind::Exp => y,
        UnaryKind::Log => T::one() / x,
        // subgradient 0 at the origin
        UnaryKind::Sqrt => {
            if y > T::zero() {
                T::of(0.5) / y
            } else {
                T::zero()
            }
        }
        UnaryKind::Square => T::of(2.0) * x,
        UnaryKind::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Gelu => {
            let c = T::of(GELU_C);
            let a = T::of(GELU_A);
            let t = (c * (x + a * x * x * x)).tanh();
            T::of(0.5) * (T::one() + t)
                + T::of(0.5) * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
        }
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::ClampMin(c) => {
            if x > c {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::SmoothL1(beta) => {
            if x.abs() < beta {
                x / beta
            } else if x > T::zero() {
                T::one()
            } else {
                -T::one()
            }
        }
    }
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not require a gradient or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a dense vector; zeros when unreachable.
    pub fn dense(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], |g| g.to_vec())
    }
}
