//! Small fixtures shared by unit tests.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{DiscriminatorConfig, PoolingStrategy};
use crate::autograd::{c, Float};
use crate::datakit::Charset;
use crate::model::ModelConfig;
use crate::recognizer::{Backbone, DecoderConfig, EncoderConfig};
use crate::synthgen::WordImage;

/// A model small enough for finite differences: height 16, tiny widths, no dropout.
pub fn tiny_config(pooling: PoolingStrategy) -> ModelConfig {
    ModelConfig {
        height: 16,
        encoder: EncoderConfig {
            backbone: Backbone::Tiny,
            rnn_layers: 1,
            rnn_hidden: 4,
            dropout: 0.0,
        },
        decoder: DecoderConfig {
            rnn_layers: 1,
            rnn_hidden: 6,
            embedding_dim: 4,
            attn_kernel: 3,
            attn_channels: 2,
            attn_dim: 5,
            dropout: 0.0,
            max_len: 6,
        },
        discriminator: DiscriminatorConfig {
            pooling,
            hidden: [6, 5],
            tpp_levels: vec![1, 2, 4],
            spp_levels: vec![1, 2],
            gru_hidden: 0,
        },
    }
}

pub fn abc() -> Charset {
    Charset::from_symbols("abc".chars())
}

/// Random ink `[B, 1, h, max(widths)]`, zero past each item's width.
pub fn random_ink<T: Float>(h: usize, widths: &[usize], seed: u64) -> ArrayD<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = *widths.iter().max().unwrap();
    let mut a = ArrayD::zeros(IxDyn(&[widths.len(), 1, h, w]));
    for (b, &wb) in widths.iter().enumerate() {
        for y in 0..h {
            for x in 0..wb {
                a[[b, 0, y, x]] = c(rng.random::<f64>());
            }
        }
    }
    a
}

/// A random labeled source image.
pub fn noise_image(h: usize, w: usize, text: &str, seed: u64) -> WordImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = ndarray::Array2::from_shape_fn((h, w), |_| rng.random::<f32>());
    WordImage::source(px, text)
}
