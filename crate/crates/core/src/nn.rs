//! Parameter storage and the small set of layers the models are built from.

use std::cell::RefCell;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{c, BatchStats, Float, Graph, NodeId, NormStats};

/// Which sub-network a tensor belongs to. Checkpoints store each section
/// under its own key prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Section {
    Encoder,
    Decoder,
    Discriminator,
}

impl Section {
    pub fn prefix(self) -> &'static str {
        match self {
            Section::Encoder => "encoder",
            Section::Decoder => "decoder",
            Section::Discriminator => "discriminator",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub section: Section,
    pub value: ArrayD<T>,
    /// Running statistics are stored alongside weights but never optimised.
    pub trainable: bool,
    pub init: Init,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

fn init_array<T: Float>(shape: &[usize], init: Init, rng: &mut impl Rng) -> ArrayD<T> {
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Ones => ArrayD::ones(IxDyn(shape)),
        Init::Uniform(bound) => {
            let n = shape.iter().product();
            let v = (0..n).map(|_| c(rng.random_range(-bound..=bound))).collect();
            ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        section: Section,
        shape: &[usize],
        init: Init,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> ParamId {
        let value = init_array(shape, init, rng);
        self.entries.push(ParamEntry {
            name: name.into(),
            section,
            value,
            trainable,
            init,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars in `section`.
    pub fn count(&self, section: Section) -> usize {
        self.entries
            .iter()
            .filter(|e| e.section == section && e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Draws fresh values for every tensor of `section` from its initialiser.
    pub fn reinitialize(&mut self, section: Section, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in self.entries.iter_mut().filter(|e| e.section == section) {
            let shape = e.value.shape().to_vec();
            e.value = init_array(&shape, e.init, &mut rng);
        }
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    section: e.section,
                    value: e.value.mapv(|v| c::<U>(v.to_f64().unwrap())),
                    trainable: e.trainable,
                    init: e.init,
                })
                .collect(),
        }
    }
}

/// Names parameters with a dotted prefix while a model is being assembled.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub section: Section,
    prefix: String,
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, section: Section) -> Self {
        Self {
            store,
            rng,
            section,
            prefix: section.prefix().to_string(),
        }
    }

    pub fn push(&mut self, name: &str) -> Builder<'_, T> {
        Builder {
            store: self.store,
            rng: self.rng,
            section: self.section,
            prefix: format!("{}.{}", self.prefix, name),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = format!("{}.{}", self.prefix, name);
        self.store
            .add(full, self.section, shape, init, true, &mut *self.rng)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = format!("{}.{}", self.prefix, name);
        self.store
            .add(full, self.section, shape, init, false, &mut *self.rng)
    }
}

/// Per-pass state shared by all layers: the graph, parameter bindings,
/// train/eval mode, the dropout stream and pending running-statistic updates.
pub struct Forward<'a, T: Float> {
    pub g: &'a Graph<T>,
    store: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<NodeId>>>,
    pub train: bool,
    track_grads: bool,
    rng: RefCell<ChaCha8Rng>,
    bn_updates: RefCell<Vec<(ParamId, ParamId, BatchStats<T>)>>,
}

impl<'a, T: Float> Forward<'a, T> {
    /// `train` selects batch statistics and dropout; `track_grads` decides
    /// whether parameters are bound as differentiable leaves.
    pub fn new(
        g: &'a Graph<T>,
        store: &'a ParamStore<T>,
        train: bool,
        track_grads: bool,
        dropout_seed: u64,
    ) -> Self {
        Self {
            g,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            train,
            track_grads,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(dropout_seed)),
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn eval(g: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Self::new(g, store, false, false, 0)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph node for a parameter, bound once per pass.
    pub fn p(&self, id: ParamId) -> NodeId {
        if let Some(n) = self.bound.borrow()[id.0] {
            return n;
        }
        let value = self.store.get(id).clone();
        let node = if self.track_grads && self.store.entries()[id.0].trainable {
            self.g.param(value, id.0)
        } else {
            self.g.constant(value)
        };
        self.bound.borrow_mut()[id.0] = Some(node);
        node
    }

    /// Inverted dropout; identity in eval mode or when `rate` is zero.
    pub fn dropout(&self, x: NodeId, rate: f64) -> NodeId {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let shape = self.g.shape(x);
        let keep = 1.0 - rate;
        let scale = c::<T>(1.0 / keep);
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let m = self
            .g
            .constant(ArrayD::from_shape_vec(IxDyn(&shape), mask).unwrap());
        self.g.mul(x, m)
    }

    /// Running-statistic updates gathered from training-mode normalisation.
    pub fn take_bn_updates(&self) -> Vec<(ParamId, ParamId, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}

/// Folds batch statistics into running statistics.
pub fn apply_bn_updates<T: Float>(
    store: &mut ParamStore<T>,
    updates: Vec<(ParamId, ParamId, BatchStats<T>)>,
    momentum: f64,
) {
    let m = c::<T>(momentum);
    for (mean_id, var_id, st) in updates {
        for (r, &b) in store.get_mut(mean_id).iter_mut().zip(&st.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(var_id).iter_mut().zip(&st.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut s = b.push(name);
        let w = s.param("weight", &[input, output], Init::Uniform(bound));
        let b = bias.then(|| s.param("bias", &[output], Init::Uniform(bound)));
        Self {
            w,
            b,
            input,
            output,
        }
    }

    pub fn forward<T: Float>(&self, f: &Forward<'_, T>, x: NodeId) -> NodeId {
        f.g.linear(x, f.p(self.w), self.b.map(|b| f.p(b)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: (usize, usize),
}

impl Conv2d {
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        name: &str,
        input: usize,
        output: usize,
        kernel: (usize, usize),
    ) -> Self {
        let fan_in = input * kernel.0 * kernel.1;
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut s = b.push(name);
        let w = s.param("weight", &[output, input, kernel.0, kernel.1], Init::Uniform(bound));
        let bb = s.param("bias", &[output], Init::Zeros);
        Self { w, b: bb, kernel }
    }

    pub fn forward<T: Float>(&self, f: &Forward<'_, T>, x: NodeId) -> NodeId {
        let pad = (self.kernel.0 / 2, self.kernel.1 / 2);
        f.g.conv2d(x, f.p(self.w), f.p(self.b), pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        let mut s = b.push(name);
        Self {
            gamma: s.param("gamma", &[channels], Init::Ones),
            beta: s.param("beta", &[channels], Init::Zeros),
            running_mean: s.buffer("running_mean", &[channels], Init::Zeros),
            running_var: s.buffer("running_var", &[channels], Init::Ones),
        }
    }

    /// Normalises axis 1. `valid` restricts statistics to the first
    /// `valid[b]` entries of the last axis.
    pub fn forward<T: Float>(&self, f: &Forward<'_, T>, x: NodeId, valid: Option<&[usize]>) -> NodeId {
        let (gamma, beta) = (f.p(self.gamma), f.p(self.beta));
        if f.train {
            let (y, stats) = f.g.batch_norm(x, gamma, beta, NormStats::Batch, valid, BN_EPS);
            if let Some(st) = stats {
                f.bn_updates
                    .borrow_mut()
                    .push((self.running_mean, self.running_var, st));
            }
            y
        } else {
            let store = f.store();
            let mean = store.get(self.running_mean).as_slice().unwrap();
            let var = store.get(self.running_var).as_slice().unwrap();
            f.g.batch_norm(x, gamma, beta, NormStats::Fixed { mean, var }, valid, BN_EPS)
                .0
        }
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, vocab: usize, dim: usize) -> Self {
        let mut s = b.push(name);
        Self {
            table: s.param("table", &[vocab, dim], Init::Uniform(1.0 / (dim as f64).sqrt())),
            dim,
        }
    }

    pub fn forward<T: Float>(&self, f: &Forward<'_, T>, ids: &[usize]) -> NodeId {
        f.g.embedding(f.p(self.table), ids)
    }
}

/// One gated-recurrent layer (reset, update and candidate gates).
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruLayer {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut s = b.push(name);
        Self {
            w_ih: s.param("w_ih", &[input, 3 * hidden], Init::Uniform(bound)),
            b_ih: s.param("b_ih", &[3 * hidden], Init::Uniform(bound)),
            w_hh: s.param("w_hh", &[hidden, 3 * hidden], Init::Uniform(bound)),
            b_hh: s.param("b_hh", &[3 * hidden], Init::Uniform(bound)),
            input,
            hidden,
        }
    }

    /// Runs over `x: [B, N, input]`, returning `[B, N, hidden]`.
    pub fn forward<T: Float>(
        &self,
        f: &Forward<'_, T>,
        x: NodeId,
        h0: Option<NodeId>,
        lengths: Option<&[usize]>,
        reverse: bool,
    ) -> NodeId {
        let gx = f.g.linear(x, f.p(self.w_ih), Some(f.p(self.b_ih)));
        f.g.gru(gx, h0, f.p(self.w_hh), f.p(self.b_hh), lengths, reverse)
    }

    /// One step from state `h: [B, hidden]` with input `x: [B, input]`.
    pub fn step<T: Float>(&self, f: &Forward<'_, T>, x: NodeId, h: NodeId) -> NodeId {
        let bsz = f.g.shape(x)[0];
        let gx = f.g.linear(x, f.p(self.w_ih), Some(f.p(self.b_ih)));
        let gx = f.g.reshape(gx, &[bsz, 1, 3 * self.hidden]);
        let out = f.g.gru(gx, Some(h), f.p(self.w_hh), f.p(self.b_hh), None, false);
        f.g.reshape(out, &[bsz, self.hidden])
    }
}
