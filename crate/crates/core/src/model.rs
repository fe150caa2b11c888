//! The full network: recognizer plus domain classifier over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{Discriminator, DiscriminatorConfig, PoolInput};
use crate::autograd::Float;
use crate::datakit::{Charset, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::nn::{Builder, ParamStore, Section};
use crate::recognizer::{Backbone, Decoder, DecoderConfig, Encoder, EncoderConfig, Recognizer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Canonical image height in pixels.
    pub height: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    /// Default desk-scale model: "small" backbone, 2x256 recurrent layers.
    pub fn small() -> Self {
        Self {
            height: 64,
            encoder: EncoderConfig {
                backbone: Backbone::Small,
                rnn_layers: 2,
                rnn_hidden: 256,
                dropout: 0.5,
            },
            decoder: DecoderConfig {
                rnn_layers: 2,
                rnn_hidden: 256,
                embedding_dim: 128,
                attn_kernel: 7,
                attn_channels: 16,
                attn_dim: 256,
                dropout: 0.5,
                max_len: DEFAULT_MAX_LEN,
            },
            discriminator: DiscriminatorConfig::default(),
        }
    }

    /// VGG-19-BN-like backbone, otherwise as [`ModelConfig::small`].
    pub fn vgg() -> Self {
        let mut cfg = Self::small();
        cfg.encoder.backbone = Backbone::Vgg19BnLike;
        cfg
    }

    /// Reduced model used for the CPU toy experiments.
    pub fn toy() -> Self {
        Self {
            height: 32,
            encoder: EncoderConfig {
                backbone: Backbone::Tiny,
                rnn_layers: 2,
                rnn_hidden: 64,
                dropout: 0.5,
            },
            decoder: DecoderConfig {
                rnn_layers: 2,
                rnn_hidden: 96,
                embedding_dim: 32,
                attn_kernel: 7,
                attn_channels: 16,
                attn_dim: 64,
                dropout: 0.5,
                max_len: 16,
            },
            discriminator: DiscriminatorConfig {
                hidden: [128, 64],
                ..DiscriminatorConfig::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "vgg19bn-like" => Ok(Self::vgg()),
            "toy" => Ok(Self::toy()),
            _ => Err(Error::Config(format!("unknown model preset `{name}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.height)?;
        self.decoder.validate()?;
        self.discriminator.validate()
    }

    pub fn pool_input(&self) -> PoolInput {
        PoolInput {
            feature_dim: self.encoder.feature_dim(),
            map_channels: self.encoder.backbone.out_channels(),
            map_rows: self.height / self.encoder.backbone.downsample(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::small()
    }
}

/// Layout plus parameters. `T` is `f32` for training and `f64` for
/// gradient checks.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub cfg: ModelConfig,
    pub charset: Charset,
    pub rec: Recognizer,
    pub disc: Discriminator,
    pub store: ParamStore<T>,
}

impl<T: Float> Network<T> {
    /// Builds and initialises every section from `seed`. Each section draws
    /// from its own stream, so re-initialising one leaves the others as they were.
    pub fn new(cfg: &ModelConfig, charset: &Charset, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
        let encoder = Encoder::new(&mut Builder::new(&mut store, &mut rng, Section::Encoder), &cfg.encoder, cfg.height);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
        let decoder = Decoder::new(
            &mut Builder::new(&mut store, &mut rng, Section::Decoder),
            &cfg.decoder,
            cfg.encoder.feature_dim(),
            charset.len(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 3));
        let disc = Discriminator::new(
            &mut Builder::new(&mut store, &mut rng, Section::Discriminator),
            &cfg.discriminator,
            cfg.pool_input(),
        );
        Ok(Self {
            cfg: cfg.clone(),
            charset: charset.clone(),
            rec: Recognizer { encoder, decoder },
            disc,
            store,
        })
    }

    /// Same layout and values in another scalar type.
    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            charset: self.charset.clone(),
            rec: self.rec.clone(),
            disc: self.disc.clone(),
            store: self.store.cast(),
        }
    }

    /// The same recognizer with a freshly initialised discriminator of another
    /// configuration (used to compare pooling strategies from one pretrained model).
    pub fn with_discriminator(&self, disc: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.discriminator = disc.clone();
        let mut out = Self::new(&cfg, &self.charset, seed)?;
        for e in out.store.entries_mut().iter_mut().filter(|e| e.section != Section::Discriminator) {
            let id = self.store.find(&e.name).expect("recognizer layout does not depend on the discriminator");
            e.value = self.store.get(id).clone();
        }
        Ok(out)
    }

    /// Fresh discriminator parameters, as at the start of adaptation.
    pub fn reset_discriminator(&mut self, seed: u64) {
        self.store.reinitialize(Section::Discriminator, mix_seed(seed, 3));
    }
}
