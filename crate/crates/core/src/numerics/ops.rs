//! Forward constructors for every differentiable operation on a [`Tape`].

use crate::error::{CmtrError, Result};
use crate::numerics::broadcast::{broadcast_shape, for_each_pair, index_map};
use crate::numerics::tape::{
    for_each_lane, gelu, permute_map, smooth_l1, softplus, BinaryKind, Op, Tape, UnaryKind, Var,
};
use crate::numerics::tensor::{numel, Tensor};
use crate::scalar::Scalar;

/// Splits `shape` around `axis` into `(outer, axis_len, inner)`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(CmtrError::shape(op, format!("axis {} out of range for {:?}", axis, shape)));
    }
    Ok((numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..])))
}

fn last_axis(shape: &[usize]) -> usize {
    shape.len().saturating_sub(1)
}

impl<T: Scalar> Tape<T> {
    fn output(&self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var]) -> Tensor<T> {
        let mut t = Tensor::new(shape, data).expect("op produced inconsistent shape");
        t.requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        t
    }

    fn binary(&mut self, op: &'static str, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(op, self.shape(a), self.shape(b))?;
        let map_a = index_map(self.shape(a), &out_shape);
        let map_b = index_map(self.shape(b), &out_shape);
        let (av, bv) = (self.data(a), self.data(b));
        let n = numel(&out_shape);
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let mut data = Vec::with_capacity(n);
        for_each_pair(&map_a, &map_b, n, |_, ia, ib| data.push(f(av[ia], bv[ib])));
        let value = self.output(out_shape, data, &[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b, map_a, map_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind<T>, x: Var) -> Var {
        let f = |v: T| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Scale(c) => v * c,
            UnaryKind::AddScalar(c) => v + c,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Square => v * v,
            UnaryKind::Abs => v.abs(),
            UnaryKind::Relu => v.max(T::zero()),
            UnaryKind::Gelu => gelu(v),
            UnaryKind::Softplus => softplus(v),
            UnaryKind::ClampMin(c) => v.max(c),
            UnaryKind::SmoothL1(beta) => smooth_l1(v, beta),
        };
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = self.output(self.shape(x).to_vec(), data, &[x]);
        self.push(value, Op::Unary { kind, x })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(UnaryKind::AddScalar(c), x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|v| !(**v > T::zero())) {
            return Err(CmtrError::domain("log", format!("input {} is not positive", bad)));
        }
        Ok(self.unary(UnaryKind::Log, x))
    }

    /// Square root; derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|v| **v < T::zero() || v.is_nan()) {
            return Err(CmtrError::domain("sqrt", format!("input {} is negative", bad)));
        }
        Ok(self.unary(UnaryKind::Sqrt, x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Square, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    /// `log(1 + exp(x))` via `max(x, 0) + log1p(exp(-|x|))`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn clamp_min(&mut self, x: Var, c: T) -> Var {
        self.unary(UnaryKind::ClampMin(c), x)
    }

    /// Elementwise Huber-style penalty with threshold `beta`.
    pub fn smooth_l1(&mut self, x: Var, beta: T) -> Result<Var> {
        if !(beta > T::zero()) {
            return Err(CmtrError::domain("smooth_l1", "beta must be positive"));
        }
        Ok(self.unary(UnaryKind::SmoothL1(beta), x))
    }

    /// `[.., M, K] x [K, N] -> [.., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(CmtrError::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = numel(&sa) / k.max(1);
        let mut data = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, T::one(), self.data(a), (k as isize, 1), self.data(b), (n as isize, 1), T::zero(), &mut data, (n as isize, 1));
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = self.output(shape, data, &[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, rows, k, n }))
    }

    /// Batched product `[G, M, K] x [G, K, N]`; with `trans_b` the right
    /// operand is stored as `[G, N, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(CmtrError::shape("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(CmtrError::shape("bmm", format!("{:?} x {:?} (trans_b={})", sa, sb, trans_b)));
        }
        let bs: (isize, isize) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut data = vec![T::zero(); g * m * n];
        let (av, bv) = (self.data(a), self.data(b));
        for gi in 0..g {
            T::gemm(m, k, n, T::one(), &av[gi * m * k..(gi + 1) * m * k], (k as isize, 1),
                &bv[gi * k * n..(gi + 1) * k * n], bs, T::zero(),
                &mut data[gi * m * n..(gi + 1) * m * n], (n as isize, 1));
        }
        let value = self.output(vec![g, m, n], data, &[a, b]);
        Ok(self.push(value, Op::Bmm { a, b, g, m, k, n, trans_b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(CmtrError::shape("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let value = self.output(shape.to_vec(), self.data(x).to_vec(), &[x]);
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(CmtrError::shape("permute", format!("invalid permutation {:?} for {:?}", perm, shape)));
        }
        let map = permute_map(&shape, perm);
        let src = self.data(x);
        let data = map.iter().map(|&s| src[s]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let value = self.output(out_shape, data, &[x]);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(CmtrError::shape("transpose", format!("rank {} < 2", r)));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| CmtrError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(CmtrError::shape("concat", format!("{:?} vs {:?} on axis {}", s, base, axis)));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&lens) {
                data.extend_from_slice(&self.data(x)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = self.output(shape, data, xs);
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), outer, inner, lens }))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, axis_len, inner) = split_axis("slice", &shape, axis)?;
        if start + len > axis_len {
            return Err(CmtrError::shape("slice", format!("{}..{} exceeds axis length {}", start, start + len, axis_len)));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * axis_len + start) * inner..(o * axis_len + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = self.output(out_shape, data, &[x]);
        Ok(self.push(value, Op::Slice { x, outer, inner, axis_len, start, len }))
    }

    /// Gathers rows along axis 0; repeated indices are allowed.
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(CmtrError::shape("index_select", "rank-0 input"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(CmtrError::shape("index_select", format!("index {} >= {}", bad, shape[0])));
        }
        let row = numel(&shape[1..]);
        let src = self.data(x);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let value = self.output(out_shape, data, &[x]);
        Ok(self.push(value, Op::IndexSelect { x, indices: indices.to_vec(), row }))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = broadcast_shape("broadcast_to", self.shape(x), shape)?;
        if out != shape {
            return Err(CmtrError::shape("broadcast_to", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let map = index_map(self.shape(x), shape);
        let src = self.data(x);
        let data = (0..numel(shape)).map(|i| src[map.at(i)]).collect();
        let value = self.output(shape.to_vec(), data, &[x]);
        Ok(self.push(value, Op::BroadcastTo { x, map }))
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner, out_shape) = match axis {
            None => (1, numel(&shape), 1, vec![]),
            Some(ax) => {
                let (o, n, i) = split_axis("reduce", &shape, ax)?;
                let mut s = shape.clone();
                s.remove(ax);
                (o, n, i, s)
            }
        };
        if mean && n == 0 {
            return Err(CmtrError::shape("mean", "empty reduction"));
        }
        let src = self.data(x);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + src[(o * n + j) * inner + i];
                }
            }
        }
        if mean {
            let nf = T::of(n as f64);
            data.iter_mut().for_each(|v| *v = *v / nf);
        }
        let value = self.output(out_shape, data, &[x]);
        let op = if mean { Op::Mean { x, outer, n, inner } } else { Op::Sum { x, outer, n, inner } };
        Ok(self.push(value, op))
    }

    /// Sum of every element, left to right.
    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, None, false).expect("full reduction cannot fail")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, None, true)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), true)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = split_axis("softmax", self.shape(x), axis)?;
        let src = self.data(x);
        let mut data = vec![T::zero(); src.len()];
        for_each_lane(outer, n, inner, |lane| {
            let max = lane.clone().map(|p| src[p]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for p in lane.clone() {
                data[p] = (src[p] - max).exp();
                total = total + data[p];
            }
            for p in lane {
                data[p] = data[p] / total;
            }
        });
        let value = self.output(self.shape(x).to_vec(), data, &[x]);
        Ok(self.push(value, Op::Softmax { x, outer, n, inner }))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let ax = last_axis(self.shape(x));
        self.softmax(x, ax)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = split_axis("log_softmax", self.shape(x), axis)?;
        let src = self.data(x);
        let mut data = vec![T::zero(); src.len()];
        for_each_lane(outer, n, inner, |lane| {
            let max = lane.clone().map(|p| src[p]).fold(T::neg_infinity(), T::max);
            let total = lane.clone().map(|p| (src[p] - max).exp()).fold(T::zero(), |s, v| s + v);
            let lse = max + total.ln();
            for p in lane {
                data[p] = src[p] - lse;
            }
        });
        let value = self.output(self.shape(x).to_vec(), data, &[x]);
        Ok(self.push(value, Op::LogSoftmax { x, outer, n, inner }))
    }

    /// Softmax over the last axis restricted to entries where `mask` is set;
    /// masked-out entries are exactly zero. Every lane needs one set entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if mask.len() != numel(&shape) || shape.is_empty() {
            return Err(CmtrError::shape("masked_softmax", format!("mask of {} for {:?}", mask.len(), shape)));
        }
        let n = shape[shape.len() - 1];
        let src = self.data(x);
        let mut data = vec![T::zero(); src.len()];
        for r in 0..src.len() / n.max(1) {
            let lane = r * n..(r + 1) * n;
            let max = lane.clone().filter(|&p| mask[p]).map(|p| src[p]).fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(CmtrError::contract(format!("masked_softmax: lane {} has no unmasked entry", r)));
            }
            let mut total = T::zero();
            for p in lane.clone().filter(|&p| mask[p]) {
                data[p] = (src[p] - max).exp();
                total = total + data[p];
            }
            for p in lane.filter(|&p| mask[p]) {
                data[p] = data[p] / total;
            }
        }
        let value = self.output(shape, data, &[x]);
        Ok(self.push(value, Op::MaskedSoftmax { x, mask: mask.to_vec(), n }))
    }

    /// Normalises to zero mean and unit (biased) variance along `axis`.
    /// No affine parameters; compose with [`Tape::mul`] / [`Tape::add`].
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(CmtrError::domain("layer_norm", "eps must be positive"));
        }
        let (outer, n, inner) = split_axis("layer_norm", self.shape(x), axis)?;
        let nf = T::of(n as f64);
        let src = self.data(x);
        let mut data = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for_each_lane(outer, n, inner, |lane| {
            let mean = lane.clone().map(|p| src[p]).fold(T::zero(), |s, v| s + v) / nf;
            let var = lane.clone().map(|p| (src[p] - mean) * (src[p] - mean)).fold(T::zero(), |s, v| s + v) / nf;
            let is = T::one() / (var + eps).sqrt();
            for p in lane {
                data[p] = (src[p] - mean) * is;
            }
            inv_std.push(is);
        });
        let value = self.output(self.shape(x).to_vec(), data, &[x]);
        Ok(self.push(value, Op::LayerNorm { x, outer, n, inner, inv_std }))
    }

    pub fn layer_norm_last(&mut self, x: Var, eps: T) -> Result<Var> {
        let ax = last_axis(self.shape(x));
        self.layer_norm(x, ax, eps)
    }
}
