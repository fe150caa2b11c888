//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export has a plain Rust twin (`*_impl`) so the logic can be tested
//! natively; the exports only convert errors for JavaScript.

use ndarray::Array2;
use wasm_bindgen::prelude::*;

use synthadapt::evalkit::{self, GapReductionInput};
use synthadapt::synthgen::{augment, render_word, AugmentConfig, FontEntry};
use synthadapt::trainer::{lambda_value, LambdaSchedule};

/// A rendered word and one augmented draw of it, as RGBA buffers.
#[wasm_bindgen]
pub struct Preview {
    height: usize,
    clean_width: usize,
    augmented_width: usize,
    clean: Vec<u8>,
    augmented: Vec<u8>,
}

#[wasm_bindgen]
impl Preview {
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn clean_width(&self) -> usize {
        self.clean_width
    }

    #[wasm_bindgen(getter)]
    pub fn augmented_width(&self) -> usize {
        self.augmented_width
    }

    pub fn clean_rgba(&self) -> Vec<u8> {
        self.clean.clone()
    }

    pub fn augmented_rgba(&self) -> Vec<u8> {
        self.augmented.clone()
    }
}

fn rgba(px: &Array2<f32>) -> Vec<u8> {
    px.iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

pub fn preset(name: &str) -> synthadapt::Result<AugmentConfig> {
    match name {
        "identity" => Ok(AugmentConfig::identity()),
        "light" => Ok(AugmentConfig::light()),
        "heavy" => Ok(AugmentConfig::heavy()),
        _ => Err(synthadapt::Error::InvalidArgument(format!("unknown augmentation preset `{name}`"))),
    }
}

pub fn augment_preview_impl(font: &[u8], word: &str, preset_name: &str, height: usize, seed: u32) -> synthadapt::Result<Preview> {
    let cfg = preset(preset_name)?;
    let font = FontEntry::from_bytes("uploaded", font.to_vec())?;
    let seed = u64::from(seed);
    let clean = render_word(word, &font, height, seed)?;
    let aug = augment(&clean, &cfg, synthadapt::mix_seed(seed, 1));
    Ok(Preview {
        height: clean.height(),
        clean_width: clean.width(),
        augmented_width: aug.width(),
        clean: rgba(&clean.pixels),
        augmented: rgba(&aug.pixels),
    })
}

/// Renders `word` with an uploaded font file and applies one seeded draw of
/// the `identity`, `light` or `heavy` augmentation preset.
#[wasm_bindgen]
pub fn augment_preview(font: &[u8], word: &str, preset_name: &str, height: usize, seed: u32) -> Result<Preview, JsError> {
    augment_preview_impl(font, word, preset_name, height, seed).map_err(|e| JsError::new(&e.to_string()))
}

pub fn lambda_curve_impl(kind: &str, horizon: f64, max: f64, epochs: f64, points: usize) -> synthadapt::Result<Vec<f64>> {
    if points < 2 || !(epochs > 0.0) {
        return Err(synthadapt::Error::InvalidArgument("need at least 2 points over a positive span".into()));
    }
    let s = LambdaSchedule {
        kind: kind.parse()?,
        horizon,
        max,
    };
    Ok((0..points)
        .map(|i| lambda_value(&s, epochs * i as f64 / (points - 1) as f64))
        .collect())
}

/// Reversal strength sampled at `points` evenly spaced epochs in `[0, epochs]`.
#[wasm_bindgen]
pub fn lambda_curve(kind: &str, horizon: f64, max: f64, epochs: f64, points: usize) -> Result<Vec<f64>, JsError> {
    lambda_curve_impl(kind, horizon, max, epochs, points).map_err(|e| JsError::new(&e.to_string()))
}

/// Percentage of the synthetic-to-real error gap closed by adaptation.
#[wasm_bindgen]
pub fn gap_reduction(err_synth: f64, err_adapted: f64, err_real: f64) -> Result<f64, JsError> {
    evalkit::gap_reduction(GapReductionInput {
        err_synth,
        err_adapted,
        err_real,
    })
    .map_err(|e| JsError::new(&e.to_string()))
}
