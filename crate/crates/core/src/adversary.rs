//! Temporal pooling, the domain classifier and gradient reversal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{c, Float, Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Builder, Forward, GruLayer, Linear};
use crate::recognizer::Encoded;

/// How a variable-length sequence becomes a fixed-size vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingStrategy {
    /// Column-wise mean over valid positions.
    Cmv,
    /// Spatial pyramid max pooling on the 2-D convolutional map.
    Spp,
    /// Temporal pyramid max pooling, horizontal divisions only.
    Tpp,
    /// Final state of a 2-layer unidirectional recurrent pass.
    Gru,
}

impl PoolingStrategy {
    pub const ALL: [PoolingStrategy; 4] = [
        PoolingStrategy::Cmv,
        PoolingStrategy::Spp,
        PoolingStrategy::Tpp,
        PoolingStrategy::Gru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolingStrategy::Cmv => "cmv",
            PoolingStrategy::Spp => "spp",
            PoolingStrategy::Tpp => "tpp",
            PoolingStrategy::Gru => "gru",
        }
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pooling strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub pooling: PoolingStrategy,
    /// Widths of the two hidden layers.
    pub hidden: [usize; 2],
    /// Horizontal segment counts of the temporal pyramid.
    pub tpp_levels: Vec<usize>,
    /// Square grid sizes of the spatial pyramid.
    pub spp_levels: Vec<usize>,
    /// Hidden size of the recurrent pooling; 0 means the feature dimension.
    pub gru_hidden: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            pooling: PoolingStrategy::Gru,
            hidden: [512, 256],
            tpp_levels: vec![1, 2, 4],
            spp_levels: vec![1, 2, 4],
            gru_hidden: 0,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        if self.tpp_levels.is_empty() || self.tpp_levels.contains(&0) {
            return Err(Error::Config("tpp_levels must be non-empty and positive".into()));
        }
        if self.spp_levels.is_empty() || self.spp_levels.contains(&0) {
            return Err(Error::Config("spp_levels must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Feature sizes the pooling sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolInput {
    /// `D`, the dimension of `H`.
    pub feature_dim: usize,
    /// Channels of the convolutional map.
    pub map_channels: usize,
    /// Rows of the convolutional map.
    pub map_rows: usize,
}

/// Output size of pooling, which depends only on the strategy and config.
pub fn pooled_dim(cfg: &DiscriminatorConfig, input: PoolInput) -> usize {
    match cfg.pooling {
        PoolingStrategy::Cmv => input.feature_dim,
        PoolingStrategy::Tpp => input.feature_dim * cfg.tpp_levels.iter().sum::<usize>(),
        PoolingStrategy::Spp => input.map_channels * cfg.spp_levels.iter().map(|l| l * l).sum::<usize>(),
        PoolingStrategy::Gru => gru_hidden(cfg, input),
    }
}

fn gru_hidden(cfg: &DiscriminatorConfig, input: PoolInput) -> usize {
    if cfg.gru_hidden == 0 {
        input.feature_dim
    } else {
        cfg.gru_hidden
    }
}

/// Pooling followed by three affine layers (batch norm and ReLU after the
/// first two) ending in one logit. `sigmoid(logit)` is the probability that
/// an item is synthetic (source = 1, target = 0).
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub input: PoolInput,
    pool_rnn: Vec<GruLayer>,
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: BatchNorm,
    fc3: Linear,
}

impl Discriminator {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &DiscriminatorConfig, input: PoolInput) -> Self {
        let mut pool_rnn = Vec::new();
        if cfg.pooling == PoolingStrategy::Gru {
            let hid = gru_hidden(cfg, input);
            pool_rnn.push(GruLayer::new(b, "pool.rnn0", input.feature_dim, hid));
            pool_rnn.push(GruLayer::new(b, "pool.rnn1", hid, hid));
        }
        let dim = pooled_dim(cfg, input);
        let [w1, w2] = cfg.hidden;
        Self {
            cfg: cfg.clone(),
            input,
            pool_rnn,
            fc1: Linear::new(b, "fc1", dim, w1, true),
            bn1: BatchNorm::new(b, "bn1", w1),
            fc2: Linear::new(b, "fc2", w1, w2, true),
            bn2: BatchNorm::new(b, "bn2", w2),
            fc3: Linear::new(b, "fc3", w2, 1, true),
        }
    }

    pub fn pooled_dim(&self) -> usize {
        pooled_dim(&self.cfg, self.input)
    }

    /// Pools `h: [B, N, D]` (or the conv map `[B, C, h', N]` for SPP) into
    /// `[B, pooled_dim]`, reading only the first `lengths[b]` positions.
    pub fn pool<T: Float>(&self, f: &Forward<'_, T>, h: NodeId, conv_map: NodeId, lengths: &[usize]) -> Result<NodeId> {
        self.pool_as(f, self.cfg.pooling, h, conv_map, lengths)
    }

    /// Like [`Discriminator::pool`] with another strategy. The recurrent
    /// strategy needs this discriminator to own recurrent pooling weights.
    pub fn pool_as<T: Float>(
        &self,
        f: &Forward<'_, T>,
        strategy: PoolingStrategy,
        h: NodeId,
        conv_map: NodeId,
        lengths: &[usize],
    ) -> Result<NodeId> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::EmptySequence);
        }
        let g = f.g;
        Ok(match strategy {
            PoolingStrategy::Cmv => g.masked_mean(h, lengths),
            PoolingStrategy::Tpp => {
                let s = g.shape(h);
                let as_map = g.permute(h, &[0, 2, 1]);
                let as_map = g.reshape(as_map, &[s[0], s[2], 1, s[1]]);
                let levels: Vec<(usize, usize)> = self.cfg.tpp_levels.iter().map(|&k| (1, k)).collect();
                g.pyramid_max_pool(as_map, lengths, &levels)
            }
            PoolingStrategy::Spp => {
                let levels: Vec<(usize, usize)> = self.cfg.spp_levels.iter().map(|&k| (k, k)).collect();
                g.pyramid_max_pool(conv_map, lengths, &levels)
            }
            PoolingStrategy::Gru => {
                if self.pool_rnn.is_empty() {
                    return Err(Error::InvalidArgument(
                        "recurrent pooling needs a discriminator trained with it".into(),
                    ));
                }
                let mut x = h;
                for layer in &self.pool_rnn {
                    x = layer.forward(f, x, None, Some(lengths), false);
                }
                // states are held past each item's length, so the last
                // column is the state after its final valid position
                let s = g.shape(x);
                let last = g.narrow(x, 1, s[1] - 1, 1);
                g.reshape(last, &[s[0], s[2]])
            }
        })
    }

    /// Logits `[B, 1]` from pooled features `[B, pooled_dim]`.
    pub fn classify<T: Float>(&self, f: &Forward<'_, T>, pooled: NodeId) -> Result<NodeId> {
        let g = f.g;
        let s = g.shape(pooled);
        if s.len() != 2 || s[1] != self.pooled_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.pooled_dim(),
                got: s.last().copied().unwrap_or(0),
            });
        }
        let x = g.relu(self.bn1.forward(f, self.fc1.forward(f, pooled), None));
        let x = g.relu(self.bn2.forward(f, self.fc2.forward(f, x), None));
        Ok(self.fc3.forward(f, x))
    }

    /// Reverses gradients into the encoder, pools and classifies.
    pub fn forward<T: Float>(&self, f: &Forward<'_, T>, enc: &Encoded, lambda: f64) -> Result<NodeId> {
        let h = grl(f.g, enc.h, lambda);
        let map = if self.cfg.pooling == PoolingStrategy::Spp {
            grl(f.g, enc.conv_map, lambda)
        } else {
            enc.conv_map
        };
        let pooled = self.pool(f, h, map, &enc.lengths)?;
        self.classify(f, pooled)
    }
}

/// Identity forward; backward multiplies the incoming gradient by `-lambda`.
pub fn grl<T: Float>(g: &Graph<T>, x: NodeId, lambda: f64) -> NodeId {
    assert!(lambda >= 0.0, "gradient reversal strength must be non-negative");
    g.grl(x, c(lambda))
}
