//! Reverse-mode autodiff over [`Tensor`]s.
//!
//! Backward rules are themselves expressed as tape operations, so a gradient
//! computed with `create_graph = true` can be differentiated again.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{self, Tensor};

/// Which keys each query may attend to, for a batch of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    batch: usize,
    len: usize,
    key_ok: Vec<bool>,
    causal_from: Option<usize>,
}

impl AttnMask {
    /// `key_ok` is `[batch, len]`; keys at or after `causal_from` are only
    /// visible to queries at the same or a later position.
    pub fn new(batch: usize, len: usize, key_ok: Vec<bool>, causal_from: Option<usize>) -> Self {
        assert_eq!(key_ok.len(), batch * len);
        Self {
            batch,
            len,
            key_ok,
            causal_from,
        }
    }

    pub fn full(batch: usize, len: usize) -> Self {
        Self::new(batch, len, vec![true; batch * len], None)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn key_ok(&self, b: usize, s: usize) -> bool {
        self.key_ok[b * self.len + s]
    }

    pub fn allowed(&self, b: usize, t: usize, s: usize) -> bool {
        self.key_ok(b, s)
            && match self.causal_from {
                Some(c) if s >= c => s <= t,
                _ => true,
            }
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f32),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Rsqrt(usize),
    Clamp(usize, f32, f32),
    SumLast(usize),
    SumTo(usize),
    BroadcastTo(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Reshape(usize),
    Swap12(usize),
    Concat(Vec<usize>, usize),
    Slice { x: usize, axis: usize, start: usize },
    Pad { x: usize, axis: usize, start: usize },
    GatherRows(usize, Rc<[usize]>),
    ScatterRows(usize, Rc<[usize]>),
    Pick(usize, Rc<[usize]>),
    Unpick(usize, Rc<[usize]>),
    LogSoftmax(usize),
    AttnProbs { q: usize, k: usize, scale: f32 },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            AttnProbs { q, k, .. } => vec![*q, *k],
            Concat(xs, _) => xs.clone(),
            Neg(x) | Scale(x, _) | AddScalar(x) | Exp(x) | Log(x) | Sigmoid(x) | Rsqrt(x)
            | Clamp(x, _, _) | SumLast(x) | SumTo(x) | BroadcastTo(x) | Reshape(x) | Swap12(x)
            | GatherRows(x, _) | ScatterRows(x, _) | Pick(x, _) | Unpick(x, _) | LogSoftmax(x) => {
                vec![*x]
            }
            Slice { x, .. } | Pad { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for later differentiation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    /// A tape that never records backward structure.
    pub fn inference() -> Self {
        let t = Self::new();
        t.grad_enabled.set(false);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floats currently held by recorded values.
    pub fn resident_floats(&self) -> usize {
        self.nodes.borrow().iter().map(|n| n.value.numel()).sum()
    }

    /// A differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        let rg = self.grad_enabled.get();
        self.push_raw(value, Op::Leaf, rg)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f32) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.grad_enabled.get() && {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn at(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Gradients of `output` with respect to each of `wrt`.
    ///
    /// `seed` is the upstream gradient (ones when `None`). With
    /// `create_graph` the returned gradients are themselves differentiable.
    pub fn grad<'t>(
        &'t self,
        output: Var<'t>,
        wrt: &[Var<'t>],
        seed: Option<Var<'t>>,
        create_graph: bool,
    ) -> Vec<Var<'t>> {
        let prev = self.grad_enabled.replace(create_graph);
        let n = output.id + 1;
        let mut needed = vec![false; n];
        for w in wrt {
            if w.id < n {
                needed[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if !needed[id] && nodes[id].requires_grad {
                    needed[id] = nodes[id].op.inputs().iter().any(|&i| needed[i]);
                }
            }
        }
        let start = self.len();
        let mut is_wrt = vec![false; n];
        for w in wrt {
            if w.id < n {
                is_wrt[w.id] = true;
            }
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        grads[output.id] = Some(match seed {
            Some(s) => {
                assert_eq!(s.shape(), output.shape(), "seed shape must match output");
                s
            }
            None => self.constant(Tensor::full(output.shape(), 1.0)),
        });
        // Without `create_graph` nothing will differentiate the backward
        // nodes, so their values are dropped as soon as no pending gradient
        // refers to them. Forward nodes are never touched.
        let mut held: HashMap<usize, usize> = HashMap::new();
        for g in grads.iter().flatten() {
            *held.entry(g.id).or_default() += 1;
        }
        let release = |held: &mut HashMap<usize, usize>, id: usize| {
            if let Some(c) = held.get_mut(&id) {
                *c -= 1;
                if *c == 0 {
                    held.remove(&id);
                }
            }
        };
        let mut swept = self.len();
        for id in (0..n).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let mut dead = Vec::new();
            for (input, gi) in self.backward(id, &op, g, &needed) {
                if !needed[input] {
                    continue;
                }
                let next = match grads[input] {
                    Some(acc) => {
                        release(&mut held, acc.id);
                        dead.push(acc.id);
                        acc.add(gi)
                    }
                    None => gi,
                };
                *held.entry(next.id).or_default() += 1;
                grads[input] = Some(next);
            }
            if create_graph {
                continue;
            }
            if !is_wrt[id] {
                grads[id] = None;
                release(&mut held, g.id);
                dead.push(g.id);
            }
            let len = self.len();
            dead.extend(swept..len);
            swept = len;
            let mut nodes = self.nodes.borrow_mut();
            for nid in dead {
                if nid >= start && !held.contains_key(&nid) {
                    nodes[nid].value = Tensor::new([0], Vec::new());
                }
            }
        }
        let out = wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.shape())),
            })
            .collect();
        self.grad_enabled.set(prev);
        out
    }

    fn backward<'t>(&'t self, id: usize, op: &Op, g: Var<'t>, needed: &[bool]) -> Vec<(usize, Var<'t>)> {
        let mut res = self.backward_all(id, op, g, needed);
        res.retain(|(i, _)| needed[*i]);
        res
    }

    /// Input gradients; expensive terms for inputs not in `needed` are skipped.
    fn backward_all<'t>(&'t self, id: usize, op: &Op, g: Var<'t>, needed: &[bool]) -> Vec<(usize, Var<'t>)> {
        use Op::*;
        let out = self.at(id);
        let v = |i: usize| self.at(i);
        match op {
            Leaf => vec![],
            Add(a, b) => vec![(*a, g.sum_to(&self.shape_of(*a))), (*b, g.sum_to(&self.shape_of(*b)))],
            Sub(a, b) => vec![
                (*a, g.sum_to(&self.shape_of(*a))),
                (*b, g.neg().sum_to(&self.shape_of(*b))),
            ],
            Mul(a, b) => {
                let mut r = Vec::new();
                if needed[*a] {
                    r.push((*a, g.mul(v(*b)).sum_to(&self.shape_of(*a))));
                }
                if needed[*b] {
                    r.push((*b, g.mul(v(*a)).sum_to(&self.shape_of(*b))));
                }
                r
            }
            Div(a, b) => {
                let mut r = Vec::new();
                if needed[*a] {
                    r.push((*a, g.div(v(*b)).sum_to(&self.shape_of(*a))));
                }
                if needed[*b] {
                    r.push((*b, g.mul(out).div(v(*b)).neg().sum_to(&self.shape_of(*b))));
                }
                r
            }
            Neg(x) => vec![(*x, g.neg())],
            Scale(x, c) => vec![(*x, g.scale(*c))],
            AddScalar(x) => vec![(*x, g)],
            Exp(x) => vec![(*x, g.mul(out))],
            Log(x) => vec![(*x, g.div(v(*x)))],
            Sigmoid(x) => vec![(*x, g.mul(out.mul(out.neg().add_scalar(1.0))))],
            Rsqrt(x) => vec![(*x, g.mul(out.mul(out).mul(out)).scale(-0.5))],
            Clamp(x, lo, hi) => {
                let mask = tensor::map(&self.value_of(*x), |t| if t >= *lo && t <= *hi { 1.0 } else { 0.0 });
                vec![(*x, g.mul(self.constant(mask)))]
            }
            SumLast(x) | SumTo(x) => vec![(*x, g.broadcast_to(&self.shape_of(*x)))],
            BroadcastTo(x) => vec![(*x, g.sum_to(&self.shape_of(*x)))],
            MatMul { a, b, ta, tb } => {
                let (va, vb) = (v(*a), v(*b));
                let mut r = Vec::new();
                if needed[*a] {
                    r.push((*a, match (ta, tb) {
                    (false, false) => g.matmul(vb, false, true),
                    (false, true) => g.matmul(vb, false, false),
                    (true, false) => vb.matmul(g, false, true),
                    (true, true) => vb.matmul(g, true, true),
                    }));
                }
                if !needed[*b] {
                    return r;
                }
                let b_shape = self.shape_of(*b);
                let gb = if b_shape.len() == 2 && self.shape_of(*a).len() > 2 {
                    assert!(!ta, "shared right operand requires an untransposed left operand");
                    let a_shape = self.shape_of(*a);
                    let k = a_shape[a_shape.len() - 1];
                    let n = g.shape()[g.shape().len() - 1];
                    let a2 = va.reshape(&[tensor::numel(&a_shape) / k, k]);
                    let g2 = g.reshape(&[g.numel() / n, n]);
                    if *tb {
                        g2.matmul(a2, true, false)
                    } else {
                        a2.matmul(g2, true, false)
                    }
                } else {
                    match (ta, tb) {
                        (false, false) => va.matmul(g, true, false),
                        (false, true) => g.matmul(va, true, false),
                        (true, false) => va.matmul(g, false, false),
                        (true, true) => g.matmul(va, true, true),
                    }
                };
                r.push((*b, gb));
                r
            }
            Reshape(x) => vec![(*x, g.reshape(&self.shape_of(*x)))],
            Swap12(x) => vec![(*x, g.swap12())],
            Concat(xs, axis) => {
                let mut off = 0;
                xs.iter()
                    .map(|&x| {
                        let len = self.shape_of(x)[*axis];
                        let gi = g.slice(*axis, off, len);
                        off += len;
                        (x, gi)
                    })
                    .collect()
            }
            Slice { x, axis, start } => {
                let total = self.shape_of(*x)[*axis];
                vec![(*x, g.pad(*axis, *start, total))]
            }
            Pad { x, axis, start } => {
                let len = self.shape_of(*x)[*axis];
                vec![(*x, g.slice(*axis, *start, len))]
            }
            GatherRows(x, idx) => {
                let rows = self.shape_of(*x)[0];
                vec![(*x, g.scatter_rows(idx.clone(), rows))]
            }
            ScatterRows(x, idx) => vec![(*x, g.gather_rows(idx.clone()))],
            Pick(x, idx) => {
                let classes = *self.shape_of(*x).last().unwrap();
                vec![(*x, g.unpick(idx.clone(), classes))]
            }
            Unpick(x, idx) => vec![(*x, g.pick(idx.clone()))],
            LogSoftmax(x) => {
                let s = g.sum_last();
                vec![(*x, g.sub(out.exp().mul(s)))]
            }
            AttnProbs { q, k, scale, .. } => {
                let ds = out.mul(g.sub(g.mul(out).sum_last()));
                let mut r = Vec::new();
                if needed[*q] {
                    r.push((*q, ds.matmul(v(*k), false, false).scale(*scale)));
                }
                if needed[*k] {
                    r.push((*k, ds.matmul(v(*q), true, false).scale(*scale)));
                }
                r
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn numel(&self) -> usize {
        tensor::numel(&self.shape())
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn push(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn binary(self, o: Var<'t>, op: Op, f: impl Fn(f32, f32) -> f32) -> Var<'t> {
        let value = tensor::zip_broadcast(&self.value(), &o.value(), f);
        self.push(value, op)
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Add(self.id, o.id), |a, b| a + b)
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Sub(self.id, o.id), |a, b| a - b)
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Mul(self.id, o.id), |a, b| a * b)
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, Op::Div(self.id, o.id), |a, b| a / b)
    }

    fn unary(self, op: Op, f: impl Fn(f32) -> f32) -> Var<'t> {
        let value = tensor::map(&self.value(), f);
        self.push(value, op)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn scale(self, c: f32) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: f32) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f32::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f32::ln)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |a| 1.0 / (1.0 + (-a).exp()))
    }

    pub fn rsqrt(self) -> Var<'t> {
        self.unary(Op::Rsqrt(self.id), |a| 1.0 / a.sqrt())
    }

    pub fn clamp(self, lo: f32, hi: f32) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |a| a.clamp(lo, hi))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn silu(self) -> Var<'t> {
        self.mul(self.sigmoid())
    }

    /// Sum over the last axis, keeping it with length 1.
    pub fn sum_last(self) -> Var<'t> {
        let value = tensor::sum_last(&self.value());
        self.push(value, Op::SumLast(self.id))
    }

    pub fn mean_last(self) -> Var<'t> {
        let n = *self.shape().last().unwrap();
        self.sum_last().scale(1.0 / n as f32)
    }

    /// Sum of every element, as a rank-0 value.
    pub fn sum(self) -> Var<'t> {
        self.sum_to(&[])
    }

    pub fn sum_to(self, shape: &[usize]) -> Var<'t> {
        if self.shape() == shape {
            return self;
        }
        let value = tensor::sum_to(&self.value(), shape);
        self.push(value, Op::SumTo(self.id))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t> {
        if self.shape() == shape {
            return self;
        }
        let value = tensor::broadcast_to(&self.value(), shape);
        self.push(value, Op::BroadcastTo(self.id))
    }

    /// `op(self) @ op(b)`, batched over leading axes. A rank-2 `b` is shared
    /// across the batch.
    pub fn matmul(self, b: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        let value = tensor::matmul(&self.value(), &b.value(), ta, tb, 1.0);
        self.push(
            value,
            Op::MatMul {
                a: self.id,
                b: b.id,
                ta,
                tb,
            },
        )
    }

    pub fn mm(self, b: Var<'t>) -> Var<'t> {
        self.matmul(b, false, false)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        if self.shape() == shape {
            return self;
        }
        let value = self.value().reshape(shape.to_vec());
        self.push(value, Op::Reshape(self.id))
    }

    pub fn swap12(self) -> Var<'t> {
        let value = tensor::swap12(&self.value());
        self.push(value, Op::Swap12(self.id))
    }

    pub fn concat(xs: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!xs.is_empty(), "concat of nothing");
        let values: Vec<Tensor> = xs.iter().map(|x| x.value()).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let value = tensor::concat(&refs, axis);
        xs[0].push(value, Op::Concat(xs.iter().map(|x| x.id).collect(), axis))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let value = tensor::slice(&self.value(), axis, start, len);
        self.push(
            value,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        )
    }

    pub fn pad(self, axis: usize, start: usize, total: usize) -> Var<'t> {
        let value = tensor::pad(&self.value(), axis, start, total);
        self.push(
            value,
            Op::Pad {
                x: self.id,
                axis,
                start,
            },
        )
    }

    /// Rows of `self` (indexed along axis 0) selected by `idx`.
    pub fn gather_rows(self, idx: Rc<[usize]>) -> Var<'t> {
        let value = tensor::gather_rows(&self.value(), &idx);
        self.push(value, Op::GatherRows(self.id, idx))
    }

    /// Adds row `k` of `self` into row `idx[k]` of a zero tensor with `rows` rows.
    pub fn scatter_rows(self, idx: Rc<[usize]>, rows: usize) -> Var<'t> {
        let value = tensor::scatter_rows(&self.value(), &idx, rows);
        self.push(value, Op::ScatterRows(self.id, idx))
    }

    /// `out[r] = self[r, idx[r]]` over the last axis.
    pub fn pick(self, idx: Rc<[usize]>) -> Var<'t> {
        let v = self.value();
        let shape = v.shape();
        let classes = *shape.last().unwrap();
        assert_eq!(idx.len() * classes, v.numel(), "pick needs one index per row");
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < classes);
                v.data()[r * classes + c]
            })
            .collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data);
        self.push(value, Op::Pick(self.id, idx))
    }

    /// Adjoint of [`Var::pick`]: one-hot rows scaled by `self`.
    pub fn unpick(self, idx: Rc<[usize]>, classes: usize) -> Var<'t> {
        let v = self.value();
        let mut data = vec![0.0f32; v.numel() * classes];
        for (r, (&c, &x)) in idx.iter().zip(v.data()).enumerate() {
            data[r * classes + c] = x;
        }
        let mut shape = v.shape().to_vec();
        shape.push(classes);
        self.push(Tensor::new(shape, data), Op::Unpick(self.id, idx))
    }

    pub fn log_softmax(self) -> Var<'t> {
        let value = tensor::log_softmax_last(&self.value());
        self.push(value, Op::LogSoftmax(self.id))
    }

    /// Masked attention weights `softmax(scale * q k^T)` for `q`, `k` of
    /// shape `[batch, heads, len, head_dim]`. Disallowed entries are exactly
    /// zero and a query with no allowed key gets an all-zero row.
    pub fn attn_probs(self, k: Var<'t>, mask: Rc<AttnMask>, scale: f32) -> Var<'t> {
        let (qv, kv) = (self.value(), k.value());
        let s = qv.shape();
        assert_eq!(s.len(), 4, "attention expects [batch, heads, len, head_dim]");
        let (b, h, t, d) = (s[0], s[1], s[2], s[3]);
        assert_eq!(kv.shape(), s, "query and key shapes differ");
        assert_eq!((mask.batch(), mask.len()), (b, t), "mask shape mismatch");
        let mut out = vec![0.0f32; b * h * t * t];
        for bi in 0..b {
            for hi in 0..h {
                let base_qk = (bi * h + hi) * t * d;
                let base_o = (bi * h + hi) * t * t;
                let block = &mut out[base_o..base_o + t * t];
                tensor::gemm(
                    t,
                    d,
                    t,
                    scale,
                    &qv.data()[base_qk..base_qk + t * d],
                    false,
                    &kv.data()[base_qk..base_qk + t * d],
                    true,
                    block,
                );
                for (ti, row) in block.chunks_exact_mut(t).enumerate() {
                    tensor::masked_softmax_row(row, |si| mask.allowed(bi, ti, si));
                }
            }
        }
        let value = Tensor::new(vec![b, h, t, t], out);
        self.push(
            value,
            Op::AttnProbs {
                q: self.id,
                k: k.id,
                scale,
            },
        )
    }
}
