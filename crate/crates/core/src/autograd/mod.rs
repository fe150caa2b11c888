//! Minimal reverse-mode automatic differentiation over `ndarray` buffers.
//!
//! A [`Graph`] records every operation of one forward pass as a node on a
//! tape. Calling [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar node with respect to every node that requires one.
//! Heavy kernels (convolution, recurrent layers, attention pieces, losses) are
//! fused into single nodes so a training step stays at a few hundred nodes.

mod kernels;

use std::cell::{Ref, RefCell};
use std::fmt::{Debug, Display};

use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

use kernels::GruCache;

/// Scalar type usable by the engine (`f32` for training, `f64` for checks).
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
}

impl Float for f32 {
    const DTYPE: &'static str = "f32";
}

impl Float for f64 {
    const DTYPE: &'static str = "f64";
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn c<T: Float>(v: f64) -> T {
    T::from_f64(v).expect("representable constant")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    Stack(Vec<NodeId>, usize),
    Narrow(NodeId, usize, usize),
    GatherRows(NodeId, Vec<usize>),
    Embedding(NodeId, Vec<usize>),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: (usize, usize),
        cols: Vec<T>,
    },
    MaxPool(NodeId, Vec<usize>),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: ArrayD<T>,
        inv_std: Vec<T>,
        valid: Option<Vec<usize>>,
        batch_stats: bool,
    },
    MaskPositions(NodeId, usize, Vec<usize>),
    Gru {
        gx: NodeId,
        h0: Option<NodeId>,
        whh: NodeId,
        bhh: NodeId,
        reverse: bool,
        cache: GruCache<T>,
    },
    MaskedSoftmax(NodeId),
    Unfold1d(NodeId, usize),
    WeightedSum(NodeId, NodeId),
    MaskedMean(NodeId, Vec<usize>),
    PyramidMax(NodeId, Vec<usize>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Array2<T>,
    },
    BceWithLogits(NodeId, Vec<T>),
    Grl(NodeId, T),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node<T> {
    value: ArrayD<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Batch statistics produced by a training-mode batch normalisation node.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<T>,
}

/// How a normalisation node obtains its statistics.
pub enum NormStats<'a, T> {
    Batch,
    Fixed { mean: &'a [T], var: &'a [T] },
}

pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients returned by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
    params: Vec<(usize, NodeId)>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of parameter leaves keyed by the index they were registered with.
    pub fn params(&self) -> impl Iterator<Item = (usize, &ArrayD<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, id)| self.grads[id.0].as_ref().map(|g| (p, g)))
    }
}

fn sum_to_shape<T: Float>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

fn as2<T: Float>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D tensor")
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(512)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, id: NodeId) -> Ref<'_, ArrayD<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id.0].value)
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|i| nodes[i.0].requires_grad)
    }

    fn push(&self, value: ArrayD<T>, op: Op<T>, parents: &[NodeId]) -> NodeId {
        let requires_grad = self.requires(parents);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(nodes.len() - 1)
    }

    /// A constant input; gradients are not propagated into it.
    pub fn constant(&self, value: ArrayD<T>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        NodeId(nodes.len() - 1)
    }

    /// A leaf that receives a gradient. `index` is reported back by
    /// [`Gradients::params`].
    pub fn param(&self, value: ArrayD<T>, index: usize) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(index),
        });
        NodeId(nodes.len() - 1)
    }

    /// A leaf that receives a gradient but is not a registered parameter.
    pub fn variable(&self, value: ArrayD<T>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        NodeId(nodes.len() - 1)
    }

    pub fn matmul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            as2(&va).dot(&as2(&vb)).into_dyn()
        };
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// Broadcasting addition.
    pub fn add(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = &*self.value(a) + &*self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = &*self.value(a) - &*self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> NodeId {
        let v = &*self.value(a) * &*self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&self, a: NodeId, s: T) -> NodeId {
        let v = &*self.value(a) * s;
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn reshape(&self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = {
            let va = self.value(a);
            va.as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape: element count mismatch")
        };
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn permute(&self, a: NodeId, axes: &[usize]) -> NodeId {
        let v = {
            let va = self.value(a);
            va.view()
                .permuted_axes(IxDyn(axes))
                .as_standard_layout()
                .into_owned()
        };
        self.push(v, Op::Permute(a, axes.to_vec()), &[a])
    }

    pub fn concat(&self, parts: &[NodeId], axis: usize) -> NodeId {
        let v = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch")
        };
        self.push(v, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn stack(&self, parts: &[NodeId], axis: usize) -> NodeId {
        let v = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::stack(Axis(axis), &views).expect("stack: shape mismatch")
        };
        self.push(v, Op::Stack(parts.to_vec(), axis), parts)
    }

    pub fn narrow(&self, a: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = {
            let va = self.value(a);
            va.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                .to_owned()
        };
        self.push(v, Op::Narrow(a, axis, start), &[a])
    }

    /// Selects rows (entries of axis 0).
    pub fn gather_rows(&self, a: NodeId, rows: &[usize]) -> NodeId {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Looks up rows of an embedding table `[V, E]`.
    pub fn embedding(&self, table: NodeId, ids: &[usize]) -> NodeId {
        let v = self.value(table).select(Axis(0), ids);
        self.push(v, Op::Embedding(table, ids.to_vec()), &[table])
    }

    /// Stride-1 2-D convolution. `x: [B, C, H, W]`, `w: [Co, C, kh, kw]`, `b: [Co]`.
    pub fn conv2d(&self, x: NodeId, w: NodeId, b: NodeId, pad: (usize, usize)) -> NodeId {
        let (v, cols) = {
            let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
            kernels::conv2d_forward(&vx, &vw, &vb, pad)
        };
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                pad,
                cols,
            },
            &[x, w, b],
        )
    }

    /// Non-overlapping max pooling with window `(kh, kw)` over `[B, C, H, W]`.
    pub fn max_pool2d(&self, x: NodeId, kernel: (usize, usize)) -> NodeId {
        let (v, argmax) = kernels::max_pool_forward(&self.value(x), kernel);
        self.push(v, Op::MaxPool(x, argmax), &[x])
    }

    /// Batch normalisation over axis 1. When `valid` is given, only the first
    /// `valid[b]` entries of the last axis of item `b` contribute to batch
    /// statistics, and the remaining outputs are zero.
    pub fn batch_norm(
        &self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: NormStats<'_, T>,
        valid: Option<&[usize]>,
        eps: f64,
    ) -> (NodeId, Option<BatchStats<T>>) {
        let batch_stats = matches!(stats, NormStats::Batch);
        let (v, xhat, inv_std, out_stats) = {
            let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
            kernels::batch_norm_forward(&vx, &vg, &vb, stats, valid, c(eps))
        };
        let id = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                valid: valid.map(|v| v.to_vec()),
                batch_stats,
            },
            &[x, gamma, beta],
        );
        (id, out_stats)
    }

    /// Zeroes entries of `axis` at or beyond `valid[b]` for each batch item `b`.
    pub fn mask_positions(&self, x: NodeId, axis: usize, valid: &[usize]) -> NodeId {
        let mut v = self.value(x).clone();
        kernels::apply_position_mask(&mut v, axis, valid);
        self.push(v, Op::MaskPositions(x, axis, valid.to_vec()), &[x])
    }

    /// A full gated-recurrent pass. `gx: [B, N, 3H]` holds the input
    /// projections (reset, update, candidate blocks), `whh: [H, 3H]`,
    /// `bhh: [3H]`. Items stop updating (hold their state) at or beyond
    /// `lengths[b]`. Returns every step's state, `[B, N, H]`.
    pub fn gru(
        &self,
        gx: NodeId,
        h0: Option<NodeId>,
        whh: NodeId,
        bhh: NodeId,
        lengths: Option<&[usize]>,
        reverse: bool,
    ) -> NodeId {
        let (v, cache) = {
            let h0v = h0.map(|h| self.value(h));
            let (vg, vw, vb) = (self.value(gx), self.value(whh), self.value(bhh));
            kernels::gru_forward(&vg, h0v.as_deref(), &vw, &vb, lengths, reverse)
        };
        let mut parents = vec![gx, whh, bhh];
        parents.extend(h0);
        self.push(
            v,
            Op::Gru {
                gx,
                h0,
                whh,
                bhh,
                reverse,
                cache,
            },
            &parents,
        )
    }

    /// Softmax over the last axis of `[B, N]`, restricted to the first
    /// `valid[b]` positions; the rest are exactly zero.
    pub fn masked_softmax(&self, e: NodeId, valid: &[usize]) -> NodeId {
        let v = kernels::masked_softmax(&self.value(e), valid);
        self.push(v, Op::MaskedSoftmax(e), &[e])
    }

    /// `[B, N] -> [B, N, r]`: zero-padded sliding windows of odd width `r`
    /// centred on each position.
    pub fn unfold1d(&self, a: NodeId, r: usize) -> NodeId {
        let v = kernels::unfold1d(&self.value(a), r);
        self.push(v, Op::Unfold1d(a, r), &[a])
    }

    /// `alpha: [B, N]`, `h: [B, N, D]` -> `[B, D]`, `sum_i alpha[b,i] h[b,i,:]`.
    pub fn weighted_sum(&self, alpha: NodeId, h: NodeId) -> NodeId {
        let v = kernels::weighted_sum(&self.value(alpha), &self.value(h));
        self.push(v, Op::WeightedSum(alpha, h), &[alpha, h])
    }

    /// `[B, N, D] -> [B, D]`, mean over the first `valid[b]` positions.
    pub fn masked_mean(&self, x: NodeId, valid: &[usize]) -> NodeId {
        let v = kernels::masked_mean(&self.value(x), valid);
        self.push(v, Op::MaskedMean(x, valid.to_vec()), &[x])
    }

    /// Pyramid max pooling over `[B, C, H, W]` where item `b` has `valid[b]`
    /// meaningful columns. Each `(rows, cols)` entry of `levels` splits the
    /// valid region into a grid; the output is `[B, C * sum(rows * cols)]`,
    /// ordered by level, then grid cell, then channel.
    pub fn pyramid_max_pool(
        &self,
        x: NodeId,
        valid: &[usize],
        levels: &[(usize, usize)],
    ) -> NodeId {
        let (v, argmax) = kernels::pyramid_max(&self.value(x), valid, levels);
        self.push(v, Op::PyramidMax(x, argmax), &[x])
    }

    /// Weighted mean softmax cross-entropy over rows of `[M, C]`. Rows with
    /// zero weight are ignored. Returns a scalar node.
    pub fn cross_entropy(&self, logits: NodeId, targets: &[usize], weights: &[T]) -> NodeId {
        let (loss, probs) = kernels::cross_entropy(&self.value(logits), targets, weights);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean binary cross-entropy between logits (any shape with `labels.len()`
    /// elements) and 0/1 labels.
    pub fn bce_with_logits(&self, logits: NodeId, labels: &[T]) -> NodeId {
        let loss = {
            let v = self.value(logits);
            assert_eq!(v.len(), labels.len(), "bce: length mismatch");
            let n = c::<T>(labels.len() as f64);
            v.iter()
                .zip(labels)
                .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
                .fold(T::zero(), |a, b| a + b)
                / n
        };
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::BceWithLogits(logits, labels.to_vec()),
            &[logits],
        )
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda` backward.
    pub fn grl(&self, x: NodeId, lambda: T) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::Grl(x, lambda), &[x])
    }

    pub fn sum_all(&self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(ndarray::arr0(s).into_dyn(), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&self, a: NodeId) -> NodeId {
        let s = {
            let v = self.value(a);
            v.sum() / c::<T>(v.len() as f64)
        };
        self.push(ndarray::arr0(s).into_dyn(), Op::MeanAll(a), &[a])
    }

    /// `x [.., K] · w [K, M] + b [M]` applied over the leading axes.
    pub fn linear(&self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let shape = self.shape(x);
        let k = *shape.last().expect("linear: scalar input");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let x2 = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[rows, k])
        };
        let mut y = self.matmul(x2, w);
        if let Some(b) = b {
            y = self.add(y, b);
        }
        if shape.len() == 2 {
            y
        } else {
            let mut out = shape.clone();
            *out.last_mut().unwrap() = self.shape(w)[1];
            self.reshape(y, &out)
        }
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar(): node has {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), T::one()));

        for id in (0..=root.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, NodeId(i))))
            .collect();
        Gradients { grads, params }
    }
}

fn accumulate<T: Float>(
    nodes: &[Node<T>],
    grads: &mut [Option<ArrayD<T>>],
    id: NodeId,
    g: ArrayD<T>,
) {
    if !nodes[id.0].requires_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Float>(
    nodes: &[Node<T>],
    id: usize,
    g: &ArrayD<T>,
    grads: &mut [Option<ArrayD<T>>],
) {
    let val = |n: NodeId| &nodes[n.0].value;
    let wants = |n: NodeId| nodes[n.0].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let g2 = as2(g);
            if wants(*a) {
                let ga = g2.dot(&as2(val(*b)).t()).into_dyn();
                accumulate(nodes, grads, *a, ga);
            }
            if wants(*b) {
                let gb = as2(val(*a)).t().dot(&g2).into_dyn();
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Add(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, sum_to_shape(g, val(*a).shape()));
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, sum_to_shape(g, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, sum_to_shape(g, val(*a).shape()));
            }
            if wants(*b) {
                let gb = sum_to_shape(g, val(*b).shape()).mapv(|x| -x);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let ga = g * val(*b);
                accumulate(nodes, grads, *a, sum_to_shape(&ga, val(*a).shape()));
            }
            if wants(*b) {
                let gb = g * val(*a);
                accumulate(nodes, grads, *b, sum_to_shape(&gb, val(*b).shape()));
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g * *s),
        Op::Tanh(a) => {
            let mut ga = g.clone();
            Zip::from(&mut ga)
                .and(out)
                .for_each(|gi, &y| *gi *= T::one() - y * y);
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sigmoid(a) => {
            let mut ga = g.clone();
            Zip::from(&mut ga)
                .and(out)
                .for_each(|gi, &y| *gi *= y * (T::one() - y));
            accumulate(nodes, grads, *a, ga);
        }
        Op::Relu(a) => {
            let mut ga = g.clone();
            Zip::from(&mut ga).and(val(*a)).for_each(|gi, &x| {
                if x <= T::zero() {
                    *gi = T::zero()
                }
            });
            accumulate(nodes, grads, *a, ga);
        }
        Op::Reshape(a) => {
            let ga = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(val(*a).raw_dim())
                .unwrap();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Permute(a, axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inv[ax] = i;
            }
            let ga = g
                .view()
                .permuted_axes(IxDyn(&inv))
                .as_standard_layout()
                .into_owned();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Concat(parts, axis) => {
            let mut start = 0;
            for p in parts {
                let len = val(*p).shape()[*axis];
                if wants(*p) {
                    let gp = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    accumulate(nodes, grads, *p, gp);
                }
                start += len;
            }
        }
        Op::Stack(parts, axis) => {
            for (i, p) in parts.iter().enumerate() {
                if wants(*p) {
                    let gp = g.index_axis(Axis(*axis), i).to_owned();
                    accumulate(nodes, grads, *p, gp);
                }
            }
        }
        Op::Narrow(a, axis, start) => {
            let mut ga = ArrayD::zeros(val(*a).raw_dim());
            let len = g.shape()[*axis];
            ga.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                .assign(g);
            accumulate(nodes, grads, *a, ga);
        }
        Op::GatherRows(a, rows) | Op::Embedding(a, rows) => {
            let mut ga = ArrayD::zeros(val(*a).raw_dim());
            for (i, &r) in rows.iter().enumerate() {
                let mut dst = ga.index_axis_mut(Axis(0), r);
                dst += &g.index_axis(Axis(0), i);
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Conv2d {
            x,
            w,
            b,
            pad,
            cols,
        } => {
            let (gx, gw, gb) =
                kernels::conv2d_backward(g, val(*x), val(*w), *pad, cols, wants(*x));
            if let Some(gx) = gx {
                accumulate(nodes, grads, *x, gx);
            }
            accumulate(nodes, grads, *w, gw);
            accumulate(nodes, grads, *b, gb);
        }
        Op::MaxPool(x, argmax) => {
            let mut gx = ArrayD::zeros(val(*x).raw_dim());
            let dst = gx.as_slice_mut().unwrap();
            for (gi, &idx) in g.iter().zip(argmax) {
                dst[idx] += *gi;
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            valid,
            batch_stats,
        } => {
            let (gx, gg, gb) = kernels::batch_norm_backward(
                g,
                xhat,
                val(*gamma),
                inv_std,
                valid.as_deref(),
                *batch_stats,
            );
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *gamma, gg);
            accumulate(nodes, grads, *beta, gb);
        }
        Op::MaskPositions(x, axis, valid) => {
            let mut gx = g.clone();
            kernels::apply_position_mask(&mut gx, *axis, valid);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Gru {
            gx,
            h0,
            whh,
            bhh,
            reverse,
            cache,
        } => {
            let (ggx, gh0, gw, gb) = kernels::gru_backward(g, val(*whh), cache, *reverse);
            accumulate(nodes, grads, *gx, ggx);
            if let Some(h0) = h0 {
                accumulate(nodes, grads, *h0, gh0);
            }
            accumulate(nodes, grads, *whh, gw);
            accumulate(nodes, grads, *bhh, gb);
        }
        Op::MaskedSoftmax(e) => {
            // d e_i = a_i (g_i - sum_j g_j a_j); masked entries have a_i = 0.
            let a2 = as2(out);
            let g2 = as2(g);
            let mut ge = Array2::zeros(a2.raw_dim());
            for b in 0..a2.nrows() {
                let dot: T = a2
                    .row(b)
                    .iter()
                    .zip(g2.row(b))
                    .map(|(&a, &gg)| a * gg)
                    .sum();
                for i in 0..a2.ncols() {
                    ge[[b, i]] = a2[[b, i]] * (g2[[b, i]] - dot);
                }
            }
            accumulate(nodes, grads, *e, ge.into_dyn());
        }
        Op::Unfold1d(a, r) => {
            let ga = kernels::unfold1d_backward(g, *r);
            accumulate(nodes, grads, *a, ga);
        }
        Op::WeightedSum(alpha, h) => {
            let (ga, gh) = kernels::weighted_sum_backward(g, val(*alpha), val(*h));
            accumulate(nodes, grads, *alpha, ga);
            accumulate(nodes, grads, *h, gh);
        }
        Op::MaskedMean(x, valid) => {
            let gx = kernels::masked_mean_backward(g, val(*x).shape(), valid);
            accumulate(nodes, grads, *x, gx);
        }
        Op::PyramidMax(x, argmax) => {
            let mut gx = ArrayD::zeros(val(*x).raw_dim());
            let dst = gx.as_slice_mut().unwrap();
            for (gi, &idx) in g.iter().zip(argmax) {
                dst[idx] += *gi;
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let scale = *g.iter().next().unwrap();
            let gl = kernels::cross_entropy_backward(probs, targets, weights, scale);
            let gl = gl
                .into_dyn()
                .into_shape_with_order(val(*logits).raw_dim())
                .unwrap();
            accumulate(nodes, grads, *logits, gl);
        }
        Op::BceWithLogits(logits, labels) => {
            let scale = *g.iter().next().unwrap() / c::<T>(labels.len() as f64);
            let mut gl = val(*logits).clone();
            for (z, &y) in gl.iter_mut().zip(labels) {
                *z = (sigmoid(*z) - y) * scale;
            }
            accumulate(nodes, grads, *logits, gl);
        }
        Op::Grl(x, lambda) => accumulate(nodes, grads, *x, g * (-*lambda)),
        Op::SumAll(a) => {
            let s = *g.iter().next().unwrap();
            accumulate(nodes, grads, *a, ArrayD::from_elem(val(*a).raw_dim(), s));
        }
        Op::MeanAll(a) => {
            let n = c::<T>(val(*a).len() as f64);
            let s = *g.iter().next().unwrap() / n;
            accumulate(nodes, grads, *a, ArrayD::from_elem(val(*a).raw_dim(), s));
        }
    }
}

#[cfg(test)]
mod tests;
