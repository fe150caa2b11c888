//! Synthetic-to-real writer adaptation for handwritten word recognition.
//!
//! A recognizer is trained on rendered word images and adapted to unlabeled
//! real handwriting through a gradient-reversal domain classifier that sees
//! temporally pooled encoder features.

pub mod adversary;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod datakit;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod fonts;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod recognizer;
pub mod synthgen;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

/// Derives an independent seed from a base seed and a counter (SplitMix64 finalizer).
pub fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
