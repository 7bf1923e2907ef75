//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every node that depends on a
//! parameter. Nodes that do not depend on any parameter keep their value but
//! none of the state needed for backpropagation, so a graph built only from
//! inputs doubles as a plain inference evaluator.

mod kernels;

pub use kernels::ConvGeometry;

use kernels::{GroupLayout, for_each_broadcast};

use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Affine(Var, F),
    Silu(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv3d { x: Var, w: Var, b: Option<Var>, geometry: ConvGeometry },
    GroupNorm { x: Var, layout: GroupLayout, means: Vec<F>, rstds: Vec<F> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatLast(Var, Var),
    Attention { q: Var, k: Var, v: Var, scale: F, probs: Tensor<F> },
    Upsample(Var, usize),
    MeanSquaredError(Var, Var),
    Sum(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("checked");
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y).expect("checked");
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("checked");
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = kernels::broadcast_shape(sa, sb)
            .unwrap_or_else(|| panic!("cannot broadcast {sa:?} with {sb:?}"));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); out_shape.iter().product()];
        for_each_broadcast(sa, sb, &out_shape, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        Tensor::from_vec(&out_shape, out).expect("broadcast shape")
    }

    /// Elementwise sum with numpy-style broadcasting over equal-rank shapes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let value = self.broadcast_binary(a, b, |x, y| x + y);
        self.push(value, Op::AddBroadcast(a, b), &[a, b])
    }

    /// Elementwise product with numpy-style broadcasting over equal-rank shapes.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        let value = self.broadcast_binary(a, b, |x, y| x * y);
        self.push(value, Op::MulBroadcast(a, b), &[a, b])
    }

    /// `a * scale + shift`.
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Var {
        let value = self.value(a).map(|x| x * scale + shift);
        self.push(value, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: Var, scale: F) -> Var {
        self.affine(a, scale, F::zero())
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x / (F::one() + (-x).exp()));
        self.push(value, Op::Silu(a), &[a])
    }

    /// Affine map over the last axis: `[..., Ci] @ [Ci, Co] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let value = kernels::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    /// 3D convolution of `[N, D, H, W, Ci]` with weights `[kt, kh, kw, Ci, Co]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geometry: ConvGeometry) -> Var {
        let value = kernels::conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geometry);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv3d { x, w, b, geometry }, &inputs)
    }

    /// Parameter-free group normalization of a channel-last tensor
    /// `[N, D, ..., C]`. With `per_frame` the statistics are taken per
    /// (sample, frame, group); otherwise per (sample, group) across frames.
    pub fn group_norm(&mut self, x: Var, groups: usize, per_frame: bool, eps: F) -> Var {
        let layout = GroupLayout::new(self.shape(x), groups, per_frame);
        let (y, means, rstds) = kernels::group_norm_forward(self.value(x).data(), layout, eps);
        let value = Tensor::from_vec(self.shape(x), y).expect("group norm shape");
        self.push(value, Op::GroupNorm { x, layout, means, rstds }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self.value(x).permute(axes);
        self.push(value, Op::Permute(x, axes.to_vec()), &[x])
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        assert!(r >= 1 && r == sb.len() && sa[..r - 1] == sb[..r - 1], "concat_last: {sa:?} vs {sb:?}");
        let (ca, cb) = (sa[r - 1], sb[r - 1]);
        let mut shape = sa.to_vec();
        shape[r - 1] = ca + cb;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (ra, rb) in da.chunks_exact(ca.max(1)).zip(db.chunks_exact(cb.max(1))) {
            out.extend_from_slice(&ra[..ca]);
            out.extend_from_slice(&rb[..cb]);
        }
        let value = Tensor::from_vec(&shape, out).expect("concat shape");
        self.push(value, Op::ConcatLast(a, b), &[a, b])
    }

    /// Softmax attention over `q: [B, Lq, Dk]`, `k: [B, Lk, Dk]`, `v: [B, Lk, Dv]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: F) -> Var {
        let (out, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v), scale);
        let needs = [q, k, v].iter().any(|x| self.requires_grad(*x));
        let probs = if needs { probs } else { Tensor::zeros(&[0]) };
        self.push(out, Op::Attention { q, k, v, scale, probs }, &[q, k, v])
    }

    /// Nearest-neighbour upsampling of the two spatial axes of `[N, D, H, W, C]`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let value = kernels::upsample_nearest(self.value(x), factor);
        self.push(value, Op::Upsample(x, factor), &[x])
    }

    /// Mean over all elements of `(a - b)^2`, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mse");
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n = F::of(da.len().max(1) as f64);
        let s: F = da.iter().zip(db).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::MeanSquaredError(a, b), &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), F::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let contributions = self.node_backward(node, &g);
            for (v, dv) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign_from(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Gradients { grads }
    }

    fn node_backward(&self, node: &Node<F>, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let mut out = vec![];
                if needs(*a) {
                    out.push((*a, g.zip_map(self.value(*b), |x, y| x * y).expect("shape")));
                }
                if needs(*b) {
                    out.push((*b, g.zip_map(self.value(*a), |x, y| x * y).expect("shape")));
                }
                out
            }
            Op::AddBroadcast(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let mut ga = vec![F::zero(); self.value(*a).numel()];
                let mut gb = vec![F::zero(); self.value(*b).numel()];
                let gd = g.data();
                for_each_broadcast(sa, sb, g.shape(), |o, ia, ib| {
                    ga[ia] += gd[o];
                    gb[ib] += gd[o];
                });
                vec![
                    (*a, Tensor::from_vec(sa, ga).expect("shape")),
                    (*b, Tensor::from_vec(sb, gb).expect("shape")),
                ]
            }
            Op::MulBroadcast(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![F::zero(); da.len()];
                let mut gb = vec![F::zero(); db.len()];
                let gd = g.data();
                for_each_broadcast(sa, sb, g.shape(), |o, ia, ib| {
                    ga[ia] += gd[o] * db[ib];
                    gb[ib] += gd[o] * da[ia];
                });
                vec![
                    (*a, Tensor::from_vec(sa, ga).expect("shape")),
                    (*b, Tensor::from_vec(sb, gb).expect("shape")),
                ]
            }
            Op::Affine(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::Silu(a) => {
                let dx = g
                    .zip_map(self.value(*a), |gv, x| {
                        let s = F::one() / (F::one() + (-x).exp());
                        gv * (s + x * s * (F::one() - s))
                    })
                    .expect("shape");
                vec![(*a, dx)]
            }
            Op::Linear { x, w, b } => {
                let grads = kernels::linear_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    [needs(*x), needs(*w), b.is_some_and(needs)],
                );
                collect_triple(*x, *w, *b, grads)
            }
            Op::Conv3d { x, w, b, geometry } => {
                let grads = kernels::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    *geometry,
                    g,
                    [needs(*x), needs(*w), b.is_some_and(needs)],
                );
                collect_triple(*x, *w, *b, grads)
            }
            Op::GroupNorm { x, layout, means, rstds } => {
                let dx = kernels::group_norm_backward(self.value(*x).data(), g.data(), *layout, means, rstds);
                vec![(*x, Tensor::from_vec(self.shape(*x), dx).expect("shape"))]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.shape(*x)).expect("shape"))],
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, g.permute(&inverse))]
            }
            Op::ConcatLast(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ca, cb) = (*sa.last().unwrap(), *sb.last().unwrap());
                let mut ga = Vec::with_capacity(self.value(*a).numel());
                let mut gb = Vec::with_capacity(self.value(*b).numel());
                for row in g.data().chunks_exact((ca + cb).max(1)) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![
                    (*a, Tensor::from_vec(sa, ga).expect("shape")),
                    (*b, Tensor::from_vec(sb, gb).expect("shape")),
                ]
            }
            Op::Attention { q, k, v, scale, probs } => {
                let (dq, dk, dv) = kernels::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    *scale,
                    g,
                );
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Upsample(x, factor) => {
                vec![(*x, kernels::upsample_nearest_backward(g, self.shape(*x), *factor))]
            }
            Op::MeanSquaredError(a, b) => {
                let scale = g.data()[0] * F::of(2.0) / F::of(self.value(*a).numel().max(1) as f64);
                let diff = self.value(*a).zip_map(self.value(*b), |x, y| (x - y) * scale).expect("shape");
                let neg = diff.map(|x| -x);
                vec![(*a, diff), (*b, neg)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), g.data()[0]))],
        }
    }
}

fn collect_triple<F: Element>(x: Var, w: Var, b: Option<Var>, grads: kernels::ConvGrads<F>) -> Vec<(Var, Tensor<F>)> {
    let mut out = vec![];
    if let Some(dx) = grads.dx {
        out.push((x, dx));
    }
    if let Some(dw) = grads.dw {
        out.push((w, dw));
    }
    if let (Some(b), Some(db)) = (b, grads.db) {
        out.push((b, db));
    }
    out
}
