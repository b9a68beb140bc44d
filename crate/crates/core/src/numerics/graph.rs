//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in execution
//! order. Append order is a topological order, so backward is a single reverse
//! sweep that visits each node once.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Slice { a: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    MeanLast(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Tanh(usize),
    Gelu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { a: usize, eps: T },
    L2Normalize { a: usize, eps: T },
    Gather { a: usize, indices: Vec<usize> },
    Embedding { table: usize, ids: Vec<usize> },
    Upsample2x(usize),
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "transpose",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumLast(..) => "sum_last",
            Op::MeanLast(..) => "mean_last",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Gather { .. } => "gather",
            Op::Embedding { .. } => "embedding",
            Op::Upsample2x(..) => "upsample2x",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape. Nodes are appended as operations execute.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Dense per-parameter gradients; parameters the loss does not touch get zeros.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn as_slice(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Global L2 norm across every gradient.
    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .map(|g| g.data().iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    /// Adds another gradient set elementwise, in parameter order.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(Error::invalid("gradients", "parameter count mismatch"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.axpy(T::one(), b)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Tape that records gradients for parameters and marked inputs.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Tape for pure evaluation; nothing requires grad.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Constant leaf, never differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that participates in gradients, e.g. an input under test.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf holding the current value of a stored parameter.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        let value = store.shared(id);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, vars: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?
            .value();
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {rank}")));
        }
        let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != rank
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first.shape()[i])
            {
                return Err(Error::shape("concat", first.shape(), s));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = vars.iter().any(|v| self.requires(v.id));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: vars.iter().map(|v| v.id).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Rows of `table` ([vocab, width]) selected by `ids`, shape [ids.len(), width].
    pub fn embedding<'g>(&'g self, table: Var<'g, T>, ids: &[usize]) -> Result<Var<'g, T>> {
        let t = table.value();
        if t.rank() != 2 {
            return Err(Error::invalid("embedding", format!("table shape {:?}", t.shape())));
        }
        let (vocab, width) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            if i >= vocab {
                return Err(Error::invalid("embedding", format!("id {i} >= vocab {vocab}")));
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            Tensor::new(&[ids.len(), width], data)?,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            self.requires(table.id),
        ))
    }

    /// Gradients for every parameter of `store`, zeros where unused.
    pub fn backward(&self, loss: Var<'_, T>, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let node_grads = self.backward_nodes(loss)?;
        let mut grads: Vec<Tensor<T>> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let nodes = self.nodes.borrow();
        for (node, g) in nodes.iter().zip(node_grads) {
            if let (Op::Param(pid), Some(g)) = (&node.op, g) {
                if pid.0 < grads.len() {
                    grads[pid.0].axpy(T::one(), &g)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of `loss` with respect to the given vars (zeros if unreachable).
    pub fn grads_for(&self, loss: Var<'_, T>, wrt: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let node_grads = self.backward_nodes(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                node_grads[v.id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
            })
            .collect())
    }

    fn backward_nodes(&self, loss: Var<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        Ok(grads)
    }
}

/// Adds into the gradient buffer of node `id`, creating it on first use.
fn acc<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    f(buf.data_mut());
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    gout: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let node = &nodes[id];
    let out = &node.value;
    let g = gout.data();
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            acc(nodes, grads, *a, |ga| add_into(ga, g));
            let neg = matches!(node.op, Op::Sub(..));
            let (ash, bsh) = (nodes[*a].value.shape().to_vec(), nodes[*b].value.shape().to_vec());
            acc(nodes, grads, *b, |gb| {
                broadcast_for_each(&ash, &bsh, |i, j| {
                    if neg {
                        gb[j] -= g[i]
                    } else {
                        gb[j] += g[i]
                    }
                })
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (ash, bsh) = (av.shape().to_vec(), bv.shape().to_vec());
            let (ad, bd) = (av.data(), bv.data());
            acc(nodes, grads, *a, |ga| broadcast_for_each(&ash, &bsh, |i, j| ga[i] += g[i] * bd[j]));
            acc(nodes, grads, *b, |gb| broadcast_for_each(&ash, &bsh, |i, j| gb[j] += g[i] * ad[i]));
        }
        Op::Scale(a, s) => acc(nodes, grads, *a, |ga| {
            for (x, &y) in ga.iter_mut().zip(g) {
                *x += y * *s
            }
        }),
        Op::AddScalar(a) | Op::Reshape(a) => acc(nodes, grads, *a, |ga| add_into(ga, g)),
        Op::MatMul { a, b, ta, tb } => matmul_backward(nodes, grads, *a, *b, *ta, *tb, g),
        Op::Conv2d { x, w, stride, pad } => conv2d_backward(nodes, grads, *x, *w, *stride, *pad, g),
        Op::Permute(a, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inv[ax] = i;
            }
            let back = permute_data(out.shape(), g, &inv);
            acc(nodes, grads, *a, |ga| add_into(ga, &back));
        }
        Op::Slice { a, axis, start } => {
            let ish = nodes[*a].value.shape().to_vec();
            let len = out.shape()[*axis];
            let outer: usize = ish[..*axis].iter().product();
            let inner: usize = ish[*axis + 1..].iter().product();
            acc(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut ga[(o * ish[*axis] + start) * inner..][..len * inner];
                    add_into(dst, src);
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[*axis + 1..].iter().product();
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let block = nodes[inp].value.shape()[*axis] * inner;
                acc(nodes, grads, inp, |gi| {
                    for o in 0..outer {
                        add_into(&mut gi[o * block..(o + 1) * block], &g[o * total + offset..][..block]);
                    }
                });
                offset += block;
            }
        }
        Op::Sum(a) => acc(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => {
            let n = T::from_usize(nodes[*a].value.numel()).unwrap();
            acc(nodes, grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0] / n))
        }
        Op::SumLast(a) | Op::MeanLast(a) => {
            let last = *nodes[*a].value.shape().last().unwrap();
            let div = if matches!(node.op, Op::MeanLast(_)) {
                T::from_usize(last).unwrap()
            } else {
                T::one()
            };
            acc(nodes, grads, *a, |ga| {
                for (row, &gv) in ga.chunks_mut(last).zip(g) {
                    row.iter_mut().for_each(|x| *x += gv / div);
                }
            })
        }
        Op::Exp(a) => acc(nodes, grads, *a, |ga| {
            for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                *x += gy * y
            }
        }),
        Op::Log(a) => {
            let av = nodes[*a].value.clone();
            acc(nodes, grads, *a, |ga| {
                for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av.data()) {
                    *x += gy / v
                }
            })
        }
        Op::Sqrt(a) => acc(nodes, grads, *a, |ga| {
            let half = T::lit(0.5);
            for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                *x += gy * half / y
            }
        }),
        Op::Tanh(a) => acc(nodes, grads, *a, |ga| {
            for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                *x += gy * (T::one() - y * y)
            }
        }),
        Op::Gelu(a) => {
            let av = nodes[*a].value.clone();
            let k = GeluConsts::new();
            acc(nodes, grads, *a, |ga| {
                for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av.data()) {
                    *x += gy * k.grad(v)
                }
            })
        }
        Op::Softmax(a) => {
            let last = *out.shape().last().unwrap();
            acc(nodes, grads, *a, |ga| {
                for ((gx, gy), y) in ga.chunks_mut(last).zip(g.chunks(last)).zip(out.data().chunks(last)) {
                    let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for i in 0..last {
                        gx[i] += y[i] * (gy[i] - dot);
                    }
                }
            })
        }
        Op::LogSoftmax(a) => {
            let last = *out.shape().last().unwrap();
            acc(nodes, grads, *a, |ga| {
                for ((gx, gy), y) in ga.chunks_mut(last).zip(g.chunks(last)).zip(out.data().chunks(last)) {
                    let s: T = gy.iter().copied().sum();
                    for i in 0..last {
                        gx[i] += gy[i] - y[i].exp() * s;
                    }
                }
            })
        }
        Op::LayerNorm { a, eps } => {
            let av = nodes[*a].value.clone();
            let last = *out.shape().last().unwrap();
            let n = T::from_usize(last).unwrap();
            acc(nodes, grads, *a, |ga| {
                for (((gx, gy), y), x) in ga
                    .chunks_mut(last)
                    .zip(g.chunks(last))
                    .zip(out.data().chunks(last))
                    .zip(av.data().chunks(last))
                {
                    let (_, rstd) = mean_rstd(x, *eps);
                    let mg = gy.iter().copied().sum::<T>() / n;
                    let mgy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for i in 0..last {
                        gx[i] += rstd * (gy[i] - mg - y[i] * mgy);
                    }
                }
            })
        }
        Op::L2Normalize { a, eps } => {
            let av = nodes[*a].value.clone();
            let last = *out.shape().last().unwrap();
            acc(nodes, grads, *a, |ga| {
                for (((gx, gy), y), x) in ga
                    .chunks_mut(last)
                    .zip(g.chunks(last))
                    .zip(out.data().chunks(last))
                    .zip(av.data().chunks(last))
                {
                    let norm = (x.iter().map(|&v| v * v).sum::<T>() + *eps).sqrt();
                    let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    for i in 0..last {
                        gx[i] += (gy[i] - y[i] * dot) / norm;
                    }
                }
            })
        }
        Op::Gather { a, indices } => {
            let last = *nodes[*a].value.shape().last().unwrap();
            acc(nodes, grads, *a, |ga| {
                for (r, (&ix, &gv)) in indices.iter().zip(g).enumerate() {
                    ga[r * last + ix] += gv;
                }
            })
        }
        Op::Embedding { table, ids } => {
            let width = out.shape()[1];
            acc(nodes, grads, *table, |gt| {
                for (r, &ix) in ids.iter().enumerate() {
                    add_into(&mut gt[ix * width..(ix + 1) * width], &g[r * width..(r + 1) * width]);
                }
            })
        }
        Op::Upsample2x(a) => {
            let s = nodes[*a].value.shape().to_vec();
            let (h, w) = (s[2], s[3]);
            acc(nodes, grads, *a, |ga| {
                for plane in 0..s[0] * s[1] {
                    let src = &g[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut ga[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
            })
        }
    }
    Ok(())
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mean_rstd<T: Scalar>(x: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Copy)]
struct GeluConsts<T> {
    c: T,
    k: T,
    k3: T,
    half: T,
    two: T,
}

impl<T: Scalar> GeluConsts<T> {
    fn new() -> Self {
        Self {
            c: T::lit(GELU_C),
            k: T::lit(0.044715),
            k3: T::lit(3.0 * 0.044715),
            half: T::lit(0.5),
            two: T::lit(2.0),
        }
    }

    /// `tanh` through one `exp`, which is markedly cheaper than libm `tanh`.
    #[inline]
    fn tanh(&self, z: T) -> T {
        let e = (self.two * z.min(T::lit(20.0)).max(T::lit(-20.0))).exp();
        (e - T::one()) / (e + T::one())
    }

    #[inline]
    fn value(&self, x: T) -> T {
        self.half * x * (T::one() + self.tanh(self.c * (x + self.k * x * x * x)))
    }

    #[inline]
    fn grad(&self, x: T) -> T {
        let th = self.tanh(self.c * (x + self.k * x * x * x));
        self.half * (T::one() + th) + self.half * x * (T::one() - th * th) * self.c * (T::one() + self.k3 * x * x)
    }
}

/// Checks that `b` broadcasts onto `a`: right-aligned, each dim equal or 1.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if b.len() > a.len() {
        return false;
    }
    let pad = a.len() - b.len();
    b.iter().enumerate().all(|(i, &d)| d == a[pad + i] || d == 1)
}

/// Calls `f(i, j)` for each flat index `i` of `a` and the index `j` of `b` it reads.
fn broadcast_for_each(a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = a.iter().product();
    let m: usize = b.iter().product();
    if n == m {
        (0..n).for_each(|i| f(i, i));
        return;
    }
    if m == 1 {
        (0..n).for_each(|i| f(i, 0));
        return;
    }
    // Collapse into runs of (size, b_stride) with b_stride 0 on broadcast dims.
    let pad = a.len() - b.len();
    let mut runs: Vec<(usize, bool)> = Vec::new();
    for (i, &d) in a.iter().enumerate() {
        let bd = if i < pad { 1 } else { b[i - pad] };
        let keep = bd == d && d != 1;
        if d == 1 {
            continue;
        }
        match runs.last_mut() {
            Some((size, k)) if *k == keep => *size *= d,
            _ => runs.push((d, keep)),
        }
    }
    let mut strides = vec![0usize; runs.len()];
    let mut acc_stride = 1;
    for (r, &(size, keep)) in runs.iter().enumerate().rev() {
        if keep {
            strides[r] = acc_stride;
            acc_stride *= size;
        }
    }
    let (inner, inner_keep) = *runs.last().unwrap();
    let outer_runs = &runs[..runs.len() - 1];
    let outer_count: usize = outer_runs.iter().map(|r| r.0).product();
    let mut counter = vec![0usize; outer_runs.len()];
    let mut i = 0;
    for _ in 0..outer_count {
        let base: usize = counter.iter().zip(&strides).map(|(c, s)| c * s).sum();
        if inner_keep {
            for k in 0..inner {
                f(i + k, base + k);
            }
        } else {
            for k in 0..inner {
                f(i + k, base);
            }
        }
        i += inner;
        for r in (0..counter.len()).rev() {
            counter[r] += 1;
            if counter[r] < outer_runs[r].0 {
                break;
            }
            counter[r] = 0;
        }
    }
}

fn permute_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

/// Reorders row-major `data` of `shape` so output axis `k` is input axis `axes[k]`.
fn permute_data<T: Scalar>(shape: &[usize], data: &[T], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permute_shape(shape, axes);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let last = rank - 1;
    let mut counter = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        for k in 0..out_shape[last] {
            out.push(data[base + k * src_strides[last]]);
        }
        let mut r = last;
        loop {
            if r == 0 {
                return out;
            }
            r -= 1;
            counter[r] += 1;
            base += src_strides[r];
            if counter[r] < out_shape[r] {
                break;
            }
            base -= src_strides[r] * counter[r];
            counter[r] = 0;
        }
    }
    out
}

/// Shape bookkeeping for a (possibly batched, possibly transposed) matmul.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Option<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return None;
    }
    let a_batch = &a[..a.len() - 2];
    let shared_rhs = b.len() == 2;
    if !shared_rhs && b[..b.len() - 2] != *a_batch {
        return None;
    }
    let mut out_shape = a_batch.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Some(MatMulDims {
        batch: a_batch.iter().product(),
        m,
        k,
        n,
        shared_rhs,
        out_shape,
    })
}

/// Row/column strides of a stored `rows x cols` matrix viewed as transposed or not.
fn view(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    let _ = rows;
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape(), ta, tb).ok_or_else(|| Error::shape("matmul", a.shape(), b.shape()))?;
    let mut out = Tensor::zeros(&d.out_shape);
    let (m, k, n) = (d.m, d.k, d.n);
    let (ars, acs) = if ta { view(k, m, true) } else { view(m, k, false) };
    let (brs, bcs) = if tb { view(n, k, true) } else { view(k, n, false) };
    if d.shared_rhs && !ta {
        // Fold the batch into rows: one large product.
        T::gemm(
            d.batch * m,
            k,
            n,
            T::one(),
            (a.data(), ars, acs),
            (b.data(), brs, bcs),
            T::zero(),
            (out.data_mut(), n as isize, 1),
        );
        return Ok(out);
    }
    for bi in 0..d.batch {
        let boff = if d.shared_rhs { 0 } else { bi * k * n };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (&a.data()[bi * m * k..], ars, acs),
            (&b.data()[boff..], brs, bcs),
            T::zero(),
            (&mut out.data_mut()[bi * m * n..], n as isize, 1),
        );
    }
    Ok(out)
}

fn matmul_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    a: usize,
    b: usize,
    ta: bool,
    tb: bool,
    g: &[T],
) {
    let (av, bv) = (nodes[a].value.clone(), nodes[b].value.clone());
    let d = matmul_dims(av.shape(), bv.shape(), ta, tb).expect("validated in forward");
    let (m, k, n) = (d.m, d.k, d.n);
    // Logical A' (m x k) and B' (k x n) strides into stored buffers.
    let (ars, acs) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
    let (brs, bcs) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
    // dA' = G B'^T  (m x k), written through A's storage layout.
    acc(nodes, grads, a, |ga| {
        for bi in 0..d.batch {
            let boff = if d.shared_rhs { 0 } else { bi * k * n };
            T::gemm(
                m,
                n,
                k,
                T::one(),
                (&g[bi * m * n..], n as isize, 1),
                (&bv.data()[boff..], bcs, brs),
                T::one(),
                (&mut ga[bi * m * k..], ars, acs),
            );
        }
    });
    // dB' = A'^T G  (k x n), written through B's storage layout.
    acc(nodes, grads, b, |gb| {
        if d.shared_rhs && !ta {
            T::gemm(
                k,
                d.batch * m,
                n,
                T::one(),
                (av.data(), acs, ars),
                (g, n as isize, 1),
                T::one(),
                (gb, brs, bcs),
            );
            return;
        }
        for bi in 0..d.batch {
            let boff = if d.shared_rhs { 0 } else { bi * k * n };
            T::gemm(
                k,
                m,
                n,
                T::one(),
                (&av.data()[bi * m * k..], acs, ars),
                (&g[bi * m * n..], n as isize, 1),
                T::one(),
                (&mut gb[boff..], brs, bcs),
            );
        }
    });
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<ConvDims> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride == 0 {
        return None;
    }
    let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return None;
    }
    Some(ConvDims {
        n: x[0],
        c: x[1],
        h,
        w: wd,
        o: w[0],
        kh,
        kw,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (wd + 2 * pad - kw) / stride + 1,
    })
}

fn is_pointwise(d: &ConvDims, stride: usize, pad: usize) -> bool {
    d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0
}

/// Unfolds one image [C, H, W] into columns [C*kh*kw, Ho*Wo].
fn im2col<T: Scalar>(img: &[T], d: &ConvDims, stride: usize, pad: usize, cols: &mut [T]) {
    let hw = d.ho * d.wo;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..d.ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * d.h + iy as usize) * d.w..][..d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds columns back, accumulating into image gradient [C, H, W].
fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, stride: usize, pad: usize, img: &mut [T]) {
    let hw = d.ho * d.wo;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..d.ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * d.h + iy as usize) * d.w..][..d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), w.shape(), stride, pad).ok_or_else(|| Error::shape("conv2d", x.shape(), w.shape()))?;
    let ckk = d.c * d.kh * d.kw;
    let hw = d.ho * d.wo;
    let mut out = Tensor::zeros(&[d.n, d.o, d.ho, d.wo]);
    let pointwise = is_pointwise(&d, stride, pad);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * hw] };
    for i in 0..d.n {
        let img = &x.data()[i * d.c * d.h * d.w..(i + 1) * d.c * d.h * d.w];
        let colsref: &[T] = if pointwise {
            img
        } else {
            im2col(img, &d, stride, pad, &mut cols);
            &cols
        };
        T::gemm(
            d.o,
            ckk,
            hw,
            T::one(),
            (w.data(), ckk as isize, 1),
            (colsref, hw as isize, 1),
            T::zero(),
            (&mut out.data_mut()[i * d.o * hw..], hw as isize, 1),
        );
    }
    Ok(out)
}

fn conv2d_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    x: usize,
    w: usize,
    stride: usize,
    pad: usize,
    g: &[T],
) {
    let (xv, wv) = (nodes[x].value.clone(), nodes[w].value.clone());
    let d = conv_dims(xv.shape(), wv.shape(), stride, pad).expect("validated in forward");
    let ckk = d.c * d.kh * d.kw;
    let hw = d.ho * d.wo;
    let chw = d.c * d.h * d.w;
    let pointwise = is_pointwise(&d, stride, pad);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ckk * hw }];
    acc(nodes, grads, w, |gw| {
        for i in 0..d.n {
            let img = &xv.data()[i * chw..(i + 1) * chw];
            let colsref: &[T] = if pointwise {
                img
            } else {
                im2col(img, &d, stride, pad, &mut cols);
                &cols
            };
            // dW += G_i [O, HW] * cols^T [HW, CKK]
            T::gemm(
                d.o,
                hw,
                ckk,
                T::one(),
                (&g[i * d.o * hw..], hw as isize, 1),
                (colsref, 1, hw as isize),
                T::one(),
                (gw, ckk as isize, 1),
            );
        }
    });
    let mut dcols = vec![T::zero(); ckk * hw];
    acc(nodes, grads, x, |gx| {
        for i in 0..d.n {
            // dcols = W^T [CKK, O] * G_i [O, HW]
            let target: &mut [T] = if pointwise { &mut gx[i * chw..(i + 1) * chw] } else { &mut dcols };
            let beta = if pointwise { T::one() } else { T::zero() };
            T::gemm(
                ckk,
                d.o,
                hw,
                T::one(),
                (wv.data(), 1, ckk as isize),
                (&g[i * d.o * hw..], hw as isize, 1),
                beta,
                (target, hw as isize, 1),
            );
            if !pointwise {
                col2im(&dcols, &d, stride, pad, &mut gx[i * chw..(i + 1) * chw]);
            }
        }
    });
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    /// Current value (shared, cheap to clone).
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'g, T> {
        let v = self.value().map(f);
        self.graph.push(v, op, self.requires_grad())
    }

    fn same_graph(&self, other: &Var<'g, T>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn binary(&self, other: Var<'g, T>, kind: &'static str, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if !broadcast_ok(a.shape(), b.shape()) {
            return Err(Error::shape(kind, a.shape(), b.shape()));
        }
        let mut data = vec![T::zero(); a.numel()];
        broadcast_for_each(a.shape(), b.shape(), |i, j| data[i] = f(a.data()[i], b.data()[j]));
        let op = match kind {
            "add" => Op::Add(self.id, other.id),
            "sub" => Op::Sub(self.id, other.id),
            _ => Op::Mul(self.id, other.id),
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(Tensor::new(a.shape(), data)?, op, rg))
    }

    /// Elementwise sum; `other` may broadcast (right-aligned, size-1 dims).
    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        self.unary(Op::Scale(self.id, s), |v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Var<'g, T> {
        self.unary(Op::AddScalar(self.id), |v| v + s)
    }

    pub fn square(&self) -> Result<Var<'g, T>> {
        self.mul(*self)
    }

    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_t(other, false, false)
    }

    /// Batched product of the last two axes, optionally transposing either side.
    /// A rank-2 right operand is shared across the batch.
    pub fn matmul_t(&self, other: Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        self.same_graph(&other);
        let out = matmul_forward(&self.value(), &other.value(), ta, tb)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            rg,
        ))
    }

    /// 2-D cross-correlation of `self` [N, C, H, W] with `weight` [O, C, kh, kw].
    pub fn conv2d(&self, weight: Var<'g, T>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        self.same_graph(&weight);
        let out = conv2d_forward(&self.value(), &weight.value(), stride, pad)?;
        let rg = self.requires_grad() || weight.requires_grad();
        Ok(self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.graph.push(v, Op::Reshape(self.id), self.requires_grad()))
    }

    /// General axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        if axes.len() != v.rank() || axes.iter().any(|&a| a >= v.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("transpose", format!("axes {axes:?} for shape {:?}", v.shape())));
        }
        let data = permute_data(v.shape(), v.data(), axes);
        let shape = permute_shape(v.shape(), axes);
        Ok(self
            .graph
            .push(Tensor::new(&shape, data)?, Op::Permute(self.id, axes.to_vec()), self.requires_grad()))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a0: usize, a1: usize) -> Result<Var<'g, T>> {
        let rank = self.value().rank();
        if a0 >= rank || a1 >= rank {
            return Err(Error::invalid("transpose", format!("axes ({a0}, {a1}) for rank {rank}")));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a0, a1);
        self.permute(&axes)
    }

    /// Elements `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        if axis >= v.rank() || start + len > v.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, v.shape()),
            ));
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let full = v.shape()[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&v.data()[(o * full + start) * inner..][..len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        Ok(self.graph.push(
            Tensor::new(&shape, data)?,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'g, T> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'g, T> {
        let s = self.value().mean();
        self.graph.push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    fn reduce_last(&self, mean: bool) -> Result<Var<'g, T>> {
        let v = self.value();
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("sum_last", "rank-0 input"))?;
        let div = if mean { T::from_usize(last).unwrap() } else { T::one() };
        let data: Vec<T> = v.data().chunks(last).map(|r| r.iter().copied().sum::<T>() / div).collect();
        let shape = &v.shape()[..v.rank() - 1];
        let op = if mean { Op::MeanLast(self.id) } else { Op::SumLast(self.id) };
        Ok(self.graph.push(Tensor::new(shape, data)?, op, self.requires_grad()))
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(&self) -> Result<Var<'g, T>> {
        self.reduce_last(false)
    }

    pub fn mean_last(&self) -> Result<Var<'g, T>> {
        self.reduce_last(true)
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(Op::Exp(self.id), |v| v.exp())
    }

    pub fn log(&self) -> Var<'g, T> {
        self.unary(Op::Log(self.id), |v| v.ln())
    }

    pub fn sqrt(&self) -> Var<'g, T> {
        self.unary(Op::Sqrt(self.id), |v| v.sqrt())
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'g, T> {
        let k = GeluConsts::new();
        self.unary(Op::Gelu(self.id), move |v| k.value(v))
    }

    fn rowwise(&self, op: Op<T>, f: impl Fn(&[T], &mut [T])) -> Result<Var<'g, T>> {
        let v = self.value();
        let kind = op.kind();
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::invalid(kind, "rank-0 input"))?;
        let mut data = vec![T::zero(); v.numel()];
        if last > 0 {
            for (src, dst) in v.data().chunks(last).zip(data.chunks_mut(last)) {
                f(src, dst);
            }
        }
        Ok(self.graph.push(Tensor::new(v.shape(), data)?, op, self.requires_grad()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'g, T>> {
        self.rowwise(Op::Softmax(self.id), |x, y| {
            let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for (o, &v) in y.iter_mut().zip(x) {
                *o = (v - m).exp();
                s += *o;
            }
            y.iter_mut().for_each(|o| *o /= s);
        })
    }

    pub fn log_softmax(&self) -> Result<Var<'g, T>> {
        self.rowwise(Op::LogSoftmax(self.id), |x, y| {
            let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for (o, &v) in y.iter_mut().zip(x) {
                *o = v - lse;
            }
        })
    }

    /// Normalizes each last-axis vector to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: T) -> Result<Var<'g, T>> {
        self.rowwise(Op::LayerNorm { a: self.id, eps }, |x, y| {
            let (mean, rstd) = mean_rstd(x, eps);
            for (o, &v) in y.iter_mut().zip(x) {
                *o = (v - mean) * rstd;
            }
        })
    }

    /// Scales each last-axis vector to unit L2 norm.
    pub fn l2_normalize(&self, eps: T) -> Result<Var<'g, T>> {
        self.rowwise(Op::L2Normalize { a: self.id, eps }, |x, y| {
            let norm = (x.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            for (o, &v) in y.iter_mut().zip(x) {
                *o = v / norm;
            }
        })
    }

    /// Picks one element per last-axis row: `out[r] = self[r, indices[r]]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let last = *v.shape().last().unwrap_or(&0);
        let rows = if last == 0 { 0 } else { v.numel() / last };
        if rows != indices.len() || indices.iter().any(|&i| i >= last) {
            return Err(Error::invalid(
                "gather",
                format!("{} indices for shape {:?}", indices.len(), v.shape()),
            ));
        }
        let data: Vec<T> = indices.iter().enumerate().map(|(r, &i)| v.data()[r * last + i]).collect();
        let shape = &v.shape()[..v.rank() - 1];
        Ok(self.graph.push(
            Tensor::new(shape, data)?,
            Op::Gather {
                a: self.id,
                indices: indices.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling of [N, C, H, W].
    pub fn upsample2x(&self) -> Result<Var<'g, T>> {
        let v = self.value();
        if v.rank() != 4 {
            return Err(Error::invalid("upsample2x", format!("shape {:?}", v.shape())));
        }
        let s = v.shape();
        let (h, w) = (s[2], s[3]);
        let mut data = Vec::with_capacity(v.numel() * 4);
        for plane in v.data().chunks(h * w) {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data.push(plane[(y / 2) * w + x / 2]);
                }
            }
        }
        Ok(self.graph.push(
            Tensor::new(&[s[0], s[1], 2 * h, 2 * w], data)?,
            Op::Upsample2x(self.id),
            self.requires_grad(),
        ))
    }

    /// Inverted dropout: zeroes elements with probability `p` and rescales the rest.
    pub fn dropout(&self, p: f64, rng: &mut impl Rng) -> Result<Var<'g, T>> {
        if p <= 0.0 {
            return Ok(*self);
        }
        if p >= 1.0 {
            return Err(Error::invalid("dropout", format!("rate {p}")));
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let v = self.value();
        let mask: Vec<T> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = self.graph.constant(Tensor::new(v.shape(), mask)?);
        self.mul(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[2], &[3., 4.]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4., 6.]);
    }

    #[test]
    fn softmax_uniform() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[3], &[0., 0., 0.]));
        for &v in a.softmax().unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let g = Graph::<f64>::new();
        let p = g.input(t(&[3], &[0.3, -1., 2.]));
        let loss = p.sum();
        let gr = g.grads_for(loss, &[p]).unwrap();
        assert_eq!(gr[0].data(), &[1., 1., 1.]);
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let g = Graph::<f64>::new();
        let p = g.input(t(&[2], &[1., 2.]));
        let q = g.input(t(&[2], &[3., 4.]));
        let loss = q.sum();
        let gr = g.grads_for(loss, &[p]).unwrap();
        assert_eq!(gr[0].data(), &[0., 0.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f64>::new();
        let p = g.input(t(&[2], &[1., 2.]));
        assert!(matches!(g.grads_for(p, &[p]), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_kind() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).err().unwrap().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]));
        assert!(a.add(c).err().unwrap().to_string().contains("add"));
    }

    #[test]
    fn broadcast_channel_and_suffix() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 2, 2]));
        let b = g.constant(t(&[1, 3, 1, 1], &[1., 2., 3.]));
        let y = x.add(b).unwrap().value();
        assert_eq!(&y.data()[0..4], &[1., 1., 1., 1.]);
        assert_eq!(&y.data()[4..8], &[2., 2., 2., 2.]);
        assert_eq!(&y.data()[12..16], &[1., 1., 1., 1.]);
        let bias = g.constant(t(&[2], &[5., 7.]));
        let y2 = x.add(bias).unwrap().value();
        assert_eq!(&y2.data()[0..4], &[5., 7., 5., 7.]);
    }

    #[test]
    fn permute_roundtrip() {
        let g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), vec![4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(y.value().data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.value().data(), &data[..]);
    }

    #[test]
    fn upsample_repeats_pixels() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 1, 1, 2], &[1., 2.]));
        let y = x.upsample2x().unwrap();
        assert_eq!(y.value().data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }
}
