//! Convolutional-recurrent encoder and location-based attention decoder.
//!
//! All forward functions build nodes on a caller-owned [`Graph`], so the same
//! code serves training (with gradients), evaluation and float64 gradient
//! checks.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{c, Float, Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Builder, Conv2d, Embedding, Forward, GruLayer, Init, Linear, ParamId};

/// Convolutional backbone presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Five 3x3 conv blocks with four 2x2 poolings.
    Small,
    /// VGG-19 with batch norm, classifier and last pooling removed.
    #[serde(rename = "vgg19bn-like")]
    Vgg19BnLike,
    /// Four narrow conv blocks with three poolings, for desk-scale experiments.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Conv(usize),
    Pool,
}

impl Backbone {
    fn blocks(self) -> Vec<Block> {
        use Block::{Conv, Pool};
        match self {
            Backbone::Small => vec![Conv(32), Pool, Conv(64), Pool, Conv(128), Pool, Conv(256), Pool, Conv(256)],
            Backbone::Vgg19BnLike => {
                let mut v = vec![Conv(64), Conv(64), Pool, Conv(128), Conv(128), Pool];
                v.extend([Conv(256); 4]);
                v.push(Pool);
                v.extend([Conv(512); 4]);
                v.push(Pool);
                v.extend([Conv(512); 4]);
                v
            }
            Backbone::Tiny => vec![Conv(16), Pool, Conv(32), Pool, Conv(64), Pool, Conv(96)],
        }
    }

    /// Horizontal (and vertical) downsampling factor.
    pub fn downsample(self) -> usize {
        1 << self.blocks().iter().filter(|b| **b == Block::Pool).count()
    }

    /// Channels of the final convolutional map.
    pub fn out_channels(self) -> usize {
        self.blocks()
            .iter()
            .rev()
            .find_map(|b| match b {
                Block::Conv(c) => Some(*c),
                Block::Pool => None,
            })
            .unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub rnn_layers: usize,
    pub rnn_hidden: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub rnn_layers: usize,
    pub rnn_hidden: usize,
    pub embedding_dim: usize,
    /// Width `r` of the location kernel `F`.
    pub attn_kernel: usize,
    /// Number of location features `p`.
    pub attn_channels: usize,
    /// Inner dimension of the score function.
    pub attn_dim: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl EncoderConfig {
    /// Feature dimension `D` of `H` (both directions concatenated).
    pub fn feature_dim(&self) -> usize {
        2 * self.rnn_hidden
    }

    pub fn validate(&self, height: usize) -> Result<()> {
        let ds = self.backbone.downsample();
        if height == 0 || height % ds != 0 {
            return Err(Error::Config(format!(
                "image height {height} must be a positive multiple of the downsample factor {ds}"
            )));
        }
        if self.rnn_layers == 0 || self.rnn_hidden == 0 {
            return Err(Error::Config("encoder needs at least one recurrent layer".into()));
        }
        check_rate(self.dropout)
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rnn_layers == 0 || self.rnn_hidden == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.attn_kernel % 2 == 0 || self.attn_channels == 0 || self.attn_dim == 0 {
            return Err(Error::Config("attention kernel width must be odd and sizes positive".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        check_rate(self.dropout)
    }
}

fn check_rate(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout {p} outside [0, 1)")))
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(Conv2d, BatchNorm),
    Pool,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub height: usize,
    layers: Vec<Layer>,
    rnn: Vec<(GruLayer, GruLayer)>,
}

/// Encoder outputs for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `H` as `[B, N, D]`, zero beyond each item's valid length.
    pub h: NodeId,
    /// Final convolutional map `[B, C, h', N]`, zero beyond valid columns.
    pub conv_map: NodeId,
    /// Valid sequence length per item.
    pub lengths: Vec<usize>,
}

/// Valid length of a sequence after `ds`-fold downsampling of `width` columns.
pub fn seq_len(width: usize, ds: usize) -> usize {
    width.div_ceil(ds)
}

impl Encoder {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &EncoderConfig, height: usize) -> Self {
        let mut layers = Vec::new();
        let mut ch = 1;
        let mut k = 0;
        for block in cfg.backbone.blocks() {
            match block {
                Block::Conv(out) => {
                    let conv = Conv2d::new(b, &format!("conv{k}"), ch, out, (3, 3));
                    let bn = BatchNorm::new(b, &format!("bn{k}"), out);
                    layers.push(Layer::Conv(conv, bn));
                    ch = out;
                    k += 1;
                }
                Block::Pool => layers.push(Layer::Pool),
            }
        }
        let ds = cfg.backbone.downsample();
        let mut input = ch * (height / ds);
        let mut rnn = Vec::new();
        for l in 0..cfg.rnn_layers {
            let f = GruLayer::new(b, &format!("rnn{l}.fwd"), input, cfg.rnn_hidden);
            let r = GruLayer::new(b, &format!("rnn{l}.bwd"), input, cfg.rnn_hidden);
            rnn.push((f, r));
            input = 2 * cfg.rnn_hidden;
        }
        Self {
            cfg: cfg.clone(),
            height,
            layers,
            rnn,
        }
    }

    pub fn downsample(&self) -> usize {
        self.cfg.backbone.downsample()
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    /// Encodes `ink: [B, 1, height, W]` whose item `b` has `widths[b]` real
    /// columns (the rest must be zero). Padded columns never influence
    /// the valid part of the output.
    pub fn forward<T: Float>(&self, f: &Forward<'_, T>, ink: &ArrayD<T>, widths: &[usize]) -> Result<Encoded> {
        let g = f.g;
        let shape = ink.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::InvalidArgument(format!("expected [B, 1, H, W] input, got {shape:?}")));
        }
        if shape[2] != self.height {
            return Err(Error::DimensionMismatch {
                expected: self.height,
                got: shape[2],
            });
        }
        if widths.len() != shape[0] {
            return Err(Error::LengthMismatch {
                left: widths.len(),
                right: shape[0],
            });
        }
        let ds = self.downsample();
        if let Some(&w) = widths.iter().find(|&&w| w == 0 || w > shape[3]) {
            return Err(Error::WidthTooSmall { width: w });
        }
        let width = seq_len(shape[3], ds) * ds;
        let x = if width == shape[3] {
            g.constant(ink.clone())
        } else {
            let mut padded = ArrayD::zeros(IxDyn(&[shape[0], 1, shape[2], width]));
            padded
                .slice_axis_mut(Axis(3), ndarray::Slice::from(..shape[3]))
                .assign(ink);
            g.constant(padded)
        };
        let mut x = x;
        let mut level = 1;
        for layer in &self.layers {
            match layer {
                Layer::Conv(conv, bn) => {
                    let valid: Vec<usize> = widths.iter().map(|&w| seq_len(w, level)).collect();
                    x = conv.forward(f, x);
                    x = bn.forward(f, x, Some(&valid));
                    x = g.relu(x);
                    x = g.mask_positions(x, 3, &valid);
                }
                Layer::Pool => {
                    // inputs are non-negative and zero past the valid width, so
                    // pooling a boundary window returns the valid maximum
                    x = g.max_pool2d(x, (2, 2));
                    level *= 2;
                }
            }
        }
        let conv_map = x;
        let s = g.shape(conv_map);
        let (bsz, ch, hh, n) = (s[0], s[1], s[2], s[3]);
        let lengths: Vec<usize> = widths.iter().map(|&w| seq_len(w, ds)).collect();
        let seq = g.permute(conv_map, &[0, 3, 1, 2]);
        let mut h = g.reshape(seq, &[bsz, n, ch * hh]);
        for (l, (fwd, bwd)) in self.rnn.iter().enumerate() {
            let a = fwd.forward(f, h, None, Some(&lengths), false);
            let b = bwd.forward(f, h, None, Some(&lengths), true);
            h = g.concat(&[a, b], 2);
            h = g.mask_positions(h, 1, &lengths);
            if l + 1 < self.rnn.len() {
                h = f.dropout(h, self.cfg.dropout);
            }
        }
        Ok(Encoded { h, conv_map, lengths })
    }
}

/// The encoder output for one image, `D x N`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    /// `[D, N]`.
    pub values: Array2<f32>,
    pub valid_length: usize,
}

impl FeatureSequence {
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// Location-based attention parameters: `F` (`[r, p]`), `W`, `V` (with `b`), `U`, `w`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub f: ParamId,
    pub w_h: Linear,
    pub v_s: Linear,
    pub u_l: Linear,
    pub w: Linear,
    pub kernel: usize,
    pub channels: usize,
}

impl Attention {
    fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &DecoderConfig, feature_dim: usize) -> Self {
        let mut s = b.push("attn");
        let f = s.param(
            "F",
            &[cfg.attn_kernel, cfg.attn_channels],
            Init::Uniform(1.0 / (cfg.attn_kernel as f64).sqrt()),
        );
        Self {
            f,
            w_h: Linear::new(&mut s, "W", feature_dim, cfg.attn_dim, false),
            v_s: Linear::new(&mut s, "V", cfg.rnn_hidden, cfg.attn_dim, true),
            u_l: Linear::new(&mut s, "U", cfg.attn_channels, cfg.attn_dim, false),
            w: Linear::new(&mut s, "w", cfg.attn_dim, 1, false),
            kernel: cfg.attn_kernel,
            channels: cfg.attn_channels,
        }
    }

    /// `W h_i` for all positions, computed once per sequence.
    pub fn project_keys<T: Float>(&self, f: &Forward<'_, T>, h: NodeId) -> NodeId {
        self.w_h.forward(f, h)
    }

    /// `alpha_k = softmax_valid(w^T tanh(W h_i + V s + U l_i + b))` with
    /// `l = F * alpha_prev`. `wh: [B, N, A]`, `s: [B, hidden]`, `alpha_prev: [B, N]`.
    pub fn scores<T: Float>(
        &self,
        f: &Forward<'_, T>,
        wh: NodeId,
        s: NodeId,
        alpha_prev: NodeId,
        lengths: &[usize],
    ) -> NodeId {
        let g = f.g;
        let shape = g.shape(wh);
        let (bsz, n, a) = (shape[0], shape[1], shape[2]);
        let windows = g.unfold1d(alpha_prev, self.kernel);
        let l = g.linear(windows, f.p(self.f), None);
        let ul = self.u_l.forward(f, l);
        let vs = self.v_s.forward(f, s);
        let vs = g.reshape(vs, &[bsz, 1, a]);
        let pre = g.add(g.add(wh, ul), vs);
        let e = self.w.forward(f, g.tanh(pre));
        let e = g.reshape(e, &[bsz, n]);
        g.masked_softmax(e, lengths)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub vocab: usize,
    pub embed: Embedding,
    pub attn: Attention,
    pub rnn: Vec<GruLayer>,
    pub out: Linear,
}

/// Recurrent decoder state for a batch.
#[derive(Clone, Debug)]
pub struct DecoderState {
    /// One `[B, hidden]` state per layer; the last is `s_{k-1}`.
    pub s: Vec<NodeId>,
    /// `alpha_{k-1}`, `[B, N]`.
    pub alpha: NodeId,
    pub step: usize,
}

/// Output of one decode step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub logits: NodeId,
    pub alpha: NodeId,
    pub context: NodeId,
}

/// `[B, N]` mask that is uniform over each item's valid positions.
pub fn uniform_alpha<T: Float>(lengths: &[usize], n: usize) -> ArrayD<T> {
    let mut a = ArrayD::zeros(IxDyn(&[lengths.len(), n]));
    for (b, &len) in lengths.iter().enumerate() {
        let v = c::<T>(1.0 / len as f64);
        for i in 0..len.min(n) {
            a[[b, i]] = v;
        }
    }
    a
}

impl Decoder {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &DecoderConfig, feature_dim: usize, vocab: usize) -> Self {
        let embed = Embedding::new(b, "embed", vocab, cfg.embedding_dim);
        let attn = Attention::new(b, cfg, feature_dim);
        let mut rnn = Vec::new();
        let mut input = cfg.embedding_dim + feature_dim;
        for l in 0..cfg.rnn_layers {
            rnn.push(GruLayer::new(b, &format!("rnn{l}"), input, cfg.rnn_hidden));
            input = cfg.rnn_hidden;
        }
        let out = Linear::new(b, "out", cfg.rnn_hidden + feature_dim, vocab, true);
        Self {
            cfg: cfg.clone(),
            vocab,
            embed,
            attn,
            rnn,
            out,
        }
    }

    /// `s_0 = 0`, `alpha_0` uniform over valid positions.
    pub fn initial_state<T: Float>(&self, g: &Graph<T>, lengths: &[usize], n: usize) -> DecoderState {
        let bsz = lengths.len();
        let zeros = || g.constant(ArrayD::zeros(IxDyn(&[bsz, self.cfg.rnn_hidden])));
        DecoderState {
            s: (0..self.rnn.len()).map(|_| zeros()).collect(),
            alpha: g.constant(uniform_alpha::<T>(lengths, n)),
            step: 0,
        }
    }

    /// One step: attend with `s_{k-1}`, read the context, update the
    /// recurrent stack with `[embed(prev), context]`, emit logits from
    /// `[s_k, context]`.
    pub fn step<T: Float>(
        &self,
        f: &Forward<'_, T>,
        h: NodeId,
        wh: NodeId,
        lengths: &[usize],
        state: &DecoderState,
        prev_tokens: &[usize],
    ) -> (StepOutput, DecoderState) {
        let g = f.g;
        let top = *state.s.last().unwrap();
        let alpha = self.attn.scores(f, wh, top, state.alpha, lengths);
        let context = g.weighted_sum(alpha, h);
        let emb = self.embed.forward(f, prev_tokens);
        let mut x = g.concat(&[emb, context], 1);
        let mut s = Vec::with_capacity(self.rnn.len());
        for (l, layer) in self.rnn.iter().enumerate() {
            let hl = layer.step(f, x, state.s[l]);
            s.push(hl);
            x = if l + 1 < self.rnn.len() {
                f.dropout(hl, self.cfg.dropout)
            } else {
                hl
            };
        }
        let logits = self.out.forward(f, g.concat(&[x, context], 1));
        (
            StepOutput {
                logits,
                alpha,
                context,
            },
            DecoderState {
                s,
                alpha,
                step: state.step + 1,
            },
        )
    }

    /// Teacher-forced pass over `targets: [B, T]`; returns logits `[B, T, V]`.
    /// The first input token is END, which doubles as start symbol.
    pub fn forward_teacher_forced<T: Float>(
        &self,
        f: &Forward<'_, T>,
        h: NodeId,
        lengths: &[usize],
        targets: &Array2<usize>,
        end: usize,
    ) -> NodeId {
        let g = f.g;
        let n = g.shape(h)[1];
        let wh = self.attn.project_keys(f, h);
        let mut state = self.initial_state(g, lengths, n);
        let mut prev = vec![end; targets.nrows()];
        let mut steps = Vec::with_capacity(targets.ncols());
        for k in 0..targets.ncols() {
            let (out, next) = self.step(f, h, wh, lengths, &state, &prev);
            steps.push(out.logits);
            state = next;
            prev = targets
                .column(k)
                .iter()
                .map(|&t| if t < self.vocab { t } else { end })
                .collect();
        }
        g.stack(&steps, 1)
    }

    /// Batched greedy decoding. Returns per-item token ids (content followed by
    /// one END) and, when `trace` is set, every step's attention mask.
    pub fn greedy<T: Float>(
        &self,
        f: &Forward<'_, T>,
        h: NodeId,
        lengths: &[usize],
        max_len: usize,
        end: usize,
        pad: usize,
        trace: bool,
    ) -> (Vec<Vec<usize>>, Vec<Array2<T>>) {
        let g = f.g;
        let bsz = lengths.len();
        let n = g.shape(h)[1];
        let wh = self.attn.project_keys(f, h);
        let mut state = self.initial_state(g, lengths, n);
        let mut prev = vec![end; bsz];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); bsz];
        let mut done = vec![false; bsz];
        let mut alphas = Vec::new();
        for _ in 0..max_len {
            let (step, next) = self.step(f, h, wh, lengths, &state, &prev);
            if trace {
                let a = g.value(step.alpha).clone();
                alphas.push(a.into_dimensionality().unwrap());
            }
            let logits = g.value(step.logits).clone();
            for b in 0..bsz {
                if done[b] {
                    continue;
                }
                let row = logits.index_axis(Axis(0), b);
                let tok = row
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != pad)
                    .fold((end, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0;
                prev[b] = tok;
                out[b].push(tok);
                if tok == end {
                    done[b] = true;
                }
            }
            state = next;
            if done.iter().all(|&d| d) {
                break;
            }
        }
        for (seq, d) in out.iter_mut().zip(&done) {
            if !d {
                seq.push(end);
            }
        }
        (out, alphas)
    }
}

/// Encoder plus decoder layout.
#[derive(Clone, Debug)]
pub struct Recognizer {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

/// Item `b` of an `H` value `[B, N, D]` as a `[D, N]` sequence.
pub fn feature_sequence(h: &ArrayD<f32>, lengths: &[usize], b: usize) -> FeatureSequence {
    let h3: Array3<f32> = h.clone().into_dimensionality().unwrap();
    let item = h3.index_axis(Axis(0), b);
    FeatureSequence {
        values: item.t().to_owned(),
        valid_length: lengths[b],
    }
}
