//! Synthetic word-image generation: font loading, rendering and online
//! augmentation.
//!
//! Everything here is a pure function of its seed arguments. Image `i` of a
//! stream is derived from `(seed, i)` alone, so any number of workers can
//! generate disjoint index ranges of the same stream.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ab_glyph_rasterizer::{point, Point, Rasterizer};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source = labeled synthetic data, target = real (possibly unlabeled) data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Label used by the domain classifier (source = 1, target = 0).
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => 1.0,
            Domain::Target => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Counts transcript reads made on behalf of a gradient computation.
#[derive(Debug, Default)]
pub struct LabelAudit {
    source: AtomicUsize,
    target: AtomicUsize,
}

impl LabelAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn source_reads(&self) -> usize {
        self.source.load(Ordering::Relaxed)
    }

    pub fn target_reads(&self) -> usize {
        self.target.load(Ordering::Relaxed)
    }
}

/// A grayscale word image in `[0, 1]`, white paper and dark ink.
#[derive(Clone, Debug, PartialEq)]
pub struct WordImage {
    /// `[height, width]`.
    pub pixels: Array2<f32>,
    transcript: Option<String>,
    pub domain: Domain,
    pub writer_id: Option<String>,
}

impl WordImage {
    pub fn source(pixels: Array2<f32>, transcript: impl Into<String>) -> Self {
        Self {
            pixels,
            transcript: Some(transcript.into()),
            domain: Domain::Source,
            writer_id: None,
        }
    }

    pub fn target(pixels: Array2<f32>, transcript: Option<String>) -> Self {
        Self {
            pixels,
            transcript,
            domain: Domain::Target,
            writer_id: None,
        }
    }

    /// Builds an image with an explicit domain. Source images must carry a transcript.
    pub fn new(
        pixels: Array2<f32>,
        domain: Domain,
        transcript: Option<String>,
        writer_id: Option<String>,
    ) -> Result<Self> {
        if domain == Domain::Source && transcript.is_none() {
            return Err(Error::InvalidArgument(
                "source-domain images must carry a transcript".into(),
            ));
        }
        if pixels.ncols() == 0 || pixels.nrows() == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        Ok(Self {
            pixels,
            transcript,
            domain,
            writer_id,
        })
    }

    pub fn with_writer(mut self, writer: impl Into<String>) -> Self {
        self.writer_id = Some(writer.into());
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    /// Transcript for measurement (evaluation, reports, export).
    pub fn transcript(&self) -> Option<&str> {
        self.transcript.as_deref()
    }

    /// Transcript for a training signal. Every call is recorded in `audit`.
    pub fn training_label(&self, audit: &LabelAudit) -> Option<&str> {
        let counter = match self.domain {
            Domain::Source => &audit.source,
            Domain::Target => &audit.target,
        };
        counter.fetch_add(1, Ordering::Relaxed);
        self.transcript.as_deref()
    }

    /// Pixel range `[0, 1]`, non-empty, source labeled.
    pub fn is_valid(&self) -> bool {
        self.width() >= 1
            && self.height() >= 1
            && self.pixels.iter().all(|&p| (0.0..=1.0).contains(&p))
            && (self.domain == Domain::Target || self.transcript.is_some())
    }
}

#[derive(Clone, Debug)]
pub struct FontEntry {
    pub font_id: String,
    pub path: PathBuf,
    data: Arc<Vec<u8>>,
}

impl FontEntry {
    pub fn from_bytes(font_id: impl Into<String>, data: Vec<u8>) -> Result<Self> {
        let font_id = font_id.into();
        ttf_parser::Face::parse(&data, 0)
            .map_err(|e| Error::InvalidArgument(format!("font `{font_id}`: {e}")))?;
        Ok(Self {
            font_id,
            path: PathBuf::new(),
            data: Arc::new(data),
        })
    }

    pub fn with_path(mut self, path: PathBuf) -> Self {
        self.path = path;
        self
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    /// Whether every non-whitespace character of `text` has a non-empty outline.
    pub fn has_outlines(&self, text: &str) -> bool {
        let face = self.face();
        text.chars().filter(|c| !c.is_whitespace()).all(|ch| {
            face.glyph_index(ch)
                .and_then(|g| face.glyph_bounding_box(g))
                .is_some_and(|r| r.width() > 0 && r.height() > 0)
        })
    }

    /// Rough test that the lowercase letters are real Latin letterforms and
    /// not symbols mapped onto Latin codepoints: `x` sits on the baseline,
    /// `p` descends below it and `l` rises above the x-height.
    pub fn looks_latin(&self) -> bool {
        let face = self.face();
        let bbox = |ch| face.glyph_index(ch).and_then(|g| face.glyph_bounding_box(g));
        let (Some(x), Some(p), Some(l)) = (bbox('x'), bbox('p'), bbox('l')) else {
            return false;
        };
        let xh = x.y_max as f32;
        xh > 0.0
            && (x.y_min as f32).abs() < 0.1 * xh
            && (p.y_min as f32) < -0.15 * xh
            && l.y_max as f32 > 1.2 * xh
    }

    fn face(&self) -> ttf_parser::Face<'_> {
        ttf_parser::Face::parse(&self.data, 0).expect("validated at registration")
    }

    /// Whether every non-whitespace character of `word` has a glyph.
    pub fn covers(&self, word: &str) -> std::result::Result<(), char> {
        let face = self.face();
        for ch in word.chars().filter(|c| !c.is_whitespace()) {
            match face.glyph_index(ch) {
                Some(g) if g.0 != 0 => {}
                _ => return Err(ch),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FontSet {
    entries: Vec<FontEntry>,
}

/// Result of scanning a font directory.
#[derive(Debug)]
pub struct FontLoad {
    pub fonts: FontSet,
    /// One message per skipped file.
    pub warnings: Vec<String>,
}

impl FontSet {
    pub fn new(entries: Vec<FontEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyFontSet(PathBuf::new()));
        }
        let mut ids: Vec<&str> = entries.iter().map(|e| e.font_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate font ids".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[FontEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, font_id: &str) -> Option<&FontEntry> {
        self.entries.iter().find(|e| e.font_id == font_id)
    }

    /// Keeps only the fonts whose ids satisfy `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Result<Self> {
        Self::new(
            self.entries
                .iter()
                .filter(|e| keep(&e.font_id))
                .cloned()
                .collect(),
        )
    }
}

fn is_font_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ttf" | "otf")
    )
}

/// Loads every `.ttf`/`.otf` file in `dir` (sorted by file name). Files that
/// fail to parse are skipped and reported in [`FontLoad::warnings`].
pub fn load_fonts(dir: impl AsRef<Path>) -> Result<FontLoad> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_font_file(p))
        .collect();
    paths.sort();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for path in paths {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("font")
            .to_string();
        let loaded = fs::read(&path)
            .map_err(Error::from)
            .and_then(|data| FontEntry::from_bytes(id.clone(), data));
        match loaded {
            Ok(mut entry) => {
                entry.path = path;
                entries.push(entry);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                warnings.push(format!("{}: {e}", path.display()));
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyFontSet(dir.to_path_buf()));
    }
    Ok(FontLoad {
        fonts: FontSet::new(entries)?,
        warnings,
    })
}

/// Corpus of unique words, one per line in its file form.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Corpus {
    pub words: Vec<String>,
    pub language_tags: Option<Vec<String>>,
}

impl Corpus {
    /// Trims, drops empty entries and removes duplicates (first occurrence wins).
    pub fn new(words: impl IntoIterator<Item = impl Into<String>>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let words = words
            .into_iter()
            .map(Into::into)
            .map(|w: String| w.trim().to_string())
            .filter(|w| !w.is_empty() && seen.insert(w.clone()))
            .collect();
        Self {
            words,
            language_tags: None,
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Self::new(text.lines()))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub const fn fixed(v: f64) -> Self {
        Range(v, v)
    }

    fn sample(self, rng: &mut impl Rng) -> f64 {
        let (lo, hi) = if self.0 <= self.1 { (self.0, self.1) } else { (self.1, self.0) };
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    }

    fn is_ordered(self) -> bool {
        self.0 <= self.1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelAugment {
    pub blur_sigma_range: Range,
    pub gamma_range: Range,
    pub brightness_range: Range,
    pub contrast_range: Range,
    pub noise_std_range: Range,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticAugment {
    pub alpha: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometricAugment {
    pub shear_range_deg: Range,
    pub rotation_range_deg: Range,
    pub scale_range: Range,
    pub elastic: ElasticAugment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundAugment {
    pub enabled: bool,
    pub texture_strength_range: Range,
}

/// Online augmentation parameters. Applied in the order geometric, elastic,
/// pixel-level, background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pixel: PixelAugment,
    pub geometric: GeometricAugment,
    pub background: BackgroundAugment,
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            pixel: PixelAugment {
                blur_sigma_range: Range::fixed(0.0),
                gamma_range: Range::fixed(1.0),
                brightness_range: Range::fixed(0.0),
                contrast_range: Range::fixed(1.0),
                noise_std_range: Range::fixed(0.0),
            },
            geometric: GeometricAugment {
                shear_range_deg: Range::fixed(0.0),
                rotation_range_deg: Range::fixed(0.0),
                scale_range: Range::fixed(1.0),
                elastic: ElasticAugment {
                    alpha: 0.0,
                    sigma: 4.0,
                },
            },
            background: BackgroundAugment {
                enabled: false,
                texture_strength_range: Range::fixed(0.0),
            },
        }
    }

    pub fn light() -> Self {
        Self {
            pixel: PixelAugment {
                blur_sigma_range: Range(0.0, 0.6),
                gamma_range: Range(0.8, 1.25),
                brightness_range: Range(-0.05, 0.05),
                contrast_range: Range(0.85, 1.15),
                noise_std_range: Range(0.0, 0.03),
            },
            geometric: GeometricAugment {
                shear_range_deg: Range(-8.0, 8.0),
                rotation_range_deg: Range(-1.5, 1.5),
                scale_range: Range(0.9, 1.1),
                elastic: ElasticAugment {
                    alpha: 1.5,
                    sigma: 4.0,
                },
            },
            background: BackgroundAugment {
                enabled: true,
                texture_strength_range: Range(0.0, 0.15),
            },
        }
    }

    pub fn heavy() -> Self {
        Self {
            pixel: PixelAugment {
                blur_sigma_range: Range(0.3, 1.0),
                gamma_range: Range(0.6, 1.6),
                brightness_range: Range(-0.1, 0.1),
                contrast_range: Range(0.6, 1.0),
                noise_std_range: Range(0.08, 0.15),
            },
            geometric: GeometricAugment {
                shear_range_deg: Range(20.0, 35.0),
                rotation_range_deg: Range(-3.0, 3.0),
                scale_range: Range(0.85, 1.1),
                elastic: ElasticAugment {
                    alpha: 3.0,
                    sigma: 3.0,
                },
            },
            background: BackgroundAugment {
                enabled: true,
                texture_strength_range: Range(0.1, 0.35),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pixel;
        let g = &self.geometric;
        let ranges = [
            ("blur_sigma_range", p.blur_sigma_range),
            ("gamma_range", p.gamma_range),
            ("brightness_range", p.brightness_range),
            ("contrast_range", p.contrast_range),
            ("noise_std_range", p.noise_std_range),
            ("shear_range_deg", g.shear_range_deg),
            ("rotation_range_deg", g.rotation_range_deg),
            ("scale_range", g.scale_range),
            ("texture_strength_range", self.background.texture_strength_range),
        ];
        for (name, r) in ranges {
            if !r.is_ordered() {
                return Err(Error::Config(format!("{name}: lower bound exceeds upper bound")));
            }
        }
        if p.blur_sigma_range.0 < 0.0 || p.noise_std_range.0 < 0.0 || g.elastic.alpha < 0.0 {
            return Err(Error::Config("blur, noise and elastic alpha must be non-negative".into()));
        }
        if p.gamma_range.0 <= 0.0 || g.scale_range.0 <= 0.0 {
            return Err(Error::Config("gamma and scale must be positive".into()));
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::light()
    }
}

struct OutlineSink<'a> {
    rast: &'a mut Rasterizer,
    scale: f32,
    ox: f32,
    oy: f32,
    last: Point,
    start: Point,
}

impl OutlineSink<'_> {
    fn map(&self, x: f32, y: f32) -> Point {
        point(self.ox + x * self.scale, self.oy - y * self.scale)
    }
}

impl ttf_parser::OutlineBuilder for OutlineSink<'_> {
    fn move_to(&mut self, x: f32, y: f32) {
        self.last = self.map(x, y);
        self.start = self.last;
    }

    fn line_to(&mut self, x: f32, y: f32) {
        let p = self.map(x, y);
        self.rast.draw_line(self.last, p);
        self.last = p;
    }

    fn quad_to(&mut self, x1: f32, y1: f32, x: f32, y: f32) {
        let (c, p) = (self.map(x1, y1), self.map(x, y));
        self.rast.draw_quad(self.last, c, p);
        self.last = p;
    }

    fn curve_to(&mut self, x1: f32, y1: f32, x2: f32, y2: f32, x: f32, y: f32) {
        let (c1, c2, p) = (self.map(x1, y1), self.map(x2, y2), self.map(x, y));
        self.rast.draw_cubic(self.last, c1, c2, p);
        self.last = p;
    }

    fn close(&mut self) {
        if self.last != self.start {
            self.rast.draw_line(self.last, self.start);
        }
        self.last = self.start;
    }
}

/// Vertical ink extent from ascender and descender glyphs, falling back to
/// the font's line metrics (which are much too tall in math fonts).
fn ink_extent(face: &ttf_parser::Face<'_>) -> (f32, f32) {
    let (mut top, mut bottom) = (f32::MIN, f32::MAX);
    for ch in "bdfhklgjpqy".chars() {
        if let Some(bb) = face.glyph_index(ch).and_then(|g| face.glyph_bounding_box(g)) {
            top = top.max(bb.y_max as f32);
            bottom = bottom.min(bb.y_min as f32);
        }
    }
    if top > bottom {
        (top, bottom)
    } else {
        (face.ascender() as f32, face.descender() as f32)
    }
}

/// Renders `word` with `font` into a source-domain image of exactly
/// `canonical_height` rows. The seed controls glyph size, margins and
/// baseline jitter.
pub fn render_word(
    word: &str,
    font: &FontEntry,
    canonical_height: usize,
    rng_seed: u64,
) -> Result<WordImage> {
    if word.is_empty() {
        return Err(Error::InvalidArgument("cannot render an empty word".into()));
    }
    if canonical_height < 4 {
        return Err(Error::InvalidArgument("canonical height must be at least 4".into()));
    }
    if let Err(ch) = font.covers(word) {
        return Err(Error::MissingGlyph {
            ch,
            font: font.font_id.clone(),
        });
    }
    let face = font.face();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let h = canonical_height as f32;
    let (asc, desc) = ink_extent(&face);
    let band = (asc - desc).max(1.0);
    let fill = rng.random_range(0.78f32..0.92);
    let scale = fill * h / band;
    let baseline = (h - band * scale) / 2.0 + asc * scale + rng.random_range(-0.04f32..0.04) * h;
    let margin_l = rng.random_range(0.04f32..0.15) * h;
    let margin_r = rng.random_range(0.04f32..0.15) * h;

    let space_adv = face
        .glyph_index(' ')
        .and_then(|g| face.glyph_hor_advance(g))
        .map(f32::from)
        .unwrap_or(band * 0.3);
    let glyphs: Vec<(Option<ttf_parser::GlyphId>, f32)> = word
        .chars()
        .map(|ch| {
            let gid = face.glyph_index(ch);
            let adv = gid
                .and_then(|g| face.glyph_hor_advance(g))
                .map(f32::from)
                .unwrap_or(space_adv);
            (gid.filter(|_| !ch.is_whitespace()), adv * scale)
        })
        .collect();
    let advance: f32 = glyphs.iter().map(|g| g.1).sum();
    let width = (margin_l + advance + margin_r).ceil().max(1.0) as usize;

    // Render on a padded canvas so overhanging glyph parts are not folded
    // back, then crop to the target box.
    let pad = canonical_height;
    let (cw, ch) = (width + 2 * pad, 3 * canonical_height);
    let mut rast = Rasterizer::new(cw, ch);
    let mut pen = pad as f32 + margin_l;
    for (gid, adv) in &glyphs {
        if let Some(gid) = gid {
            let mut sink = OutlineSink {
                rast: &mut rast,
                scale,
                ox: pen,
                oy: canonical_height as f32 + baseline,
                last: point(0.0, 0.0),
                start: point(0.0, 0.0),
            };
            face.outline_glyph(*gid, &mut sink);
        }
        pen += adv;
    }
    let mut cov = vec![0f32; cw * ch];
    rast.for_each_pixel(|i, a| cov[i] = a);
    let pixels = Array2::from_shape_fn((canonical_height, width), |(y, x)| {
        let a = cov[(y + canonical_height) * cw + x + pad].abs().min(1.0);
        1.0 - a
    });
    Ok(WordImage::source(pixels, word).with_writer(font.font_id.clone()))
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let tmp: Array2<f32> = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * img[[y, clampi(x as isize + i as isize - r, w)]])
            .sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp[[clampi(y as isize + i as isize - r, h), x]])
            .sum::<f32>()
    })
}

/// Bilinear sample with background `fill` outside the image.
fn sample_bilinear(img: &Array2<f32>, x: f64, y: f64, fill: f32) -> f32 {
    let (h, w) = img.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let get = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            fill
        } else {
            img[[yy as usize, xx as usize]]
        }
    };
    let a = get(y0, x0) * (1.0 - fx) + get(y0, x0 + 1.0) * fx;
    let b = get(y0 + 1.0, x0) * (1.0 - fx) + get(y0 + 1.0, x0 + 1.0) * fx;
    a * (1.0 - fy) + b * fy
}

/// Resizes to `height` rows, keeping the aspect ratio (bilinear).
pub fn resize_to_height(img: &Array2<f32>, height: usize) -> Array2<f32> {
    let (h, w) = img.dim();
    if h == height {
        return img.clone();
    }
    let new_w = ((w as f64 * height as f64 / h as f64).round() as usize).max(1);
    let sy = h as f64 / height as f64;
    let sx = w as f64 / new_w as f64;
    Array2::from_shape_fn((height, new_w), |(y, x)| {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        sample_bilinear(img, src_x, src_y, 1.0)
    })
}

fn affine_warp(img: &Array2<f32>, shear_deg: f64, rot_deg: f64, scale: f64) -> Array2<f32> {
    let (h, w) = img.dim();
    let (sh, rot) = (shear_deg.to_radians().tan(), rot_deg.to_radians());
    let (cs, sn) = (rot.cos(), rot.sin());
    // forward map about the centre: p' = R * Shear * S * (p - c)
    let m = [
        [cs * scale, (cs * sh - sn) * scale],
        [sn * scale, (sn * sh + cs) * scale],
    ];
    // the output keeps the input height and grows horizontally to hold the
    // mapped word, so scaling really changes glyph size
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let corners = [(-cx, -cy), (cx, -cy), (-cx, cy), (cx, cy)];
    let xs: Vec<f64> = corners.iter().map(|&(x, y)| m[0][0] * x + m[0][1] * y).collect();
    let min_x = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let max_x = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ow = ((max_x - min_x).ceil() as usize).max(1);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [
        [m[1][1] / det, -m[0][1] / det],
        [-m[1][0] / det, m[0][0] / det],
    ];
    Array2::from_shape_fn((h, ow), |(y, x)| {
        let px = x as f64 + 0.5 + min_x;
        let py = y as f64 + 0.5 - cy;
        let sx = inv[0][0] * px + inv[0][1] * py + cx - 0.5;
        let sy = inv[1][0] * px + inv[1][1] * py + cy - 0.5;
        sample_bilinear(img, sx, sy, 1.0)
    })
}

fn elastic_warp(img: &Array2<f32>, alpha: f64, sigma: f64, rng: &mut impl Rng) -> Array2<f32> {
    let (h, w) = img.dim();
    let field = |rng: &mut dyn rand::RngCore| {
        let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0f32..1.0));
        let smooth = gaussian_blur(&raw, sigma);
        // rescale so the strongest displacement is `alpha` pixels
        let peak = smooth.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-6);
        smooth.mapv(|v| v / peak * alpha as f32)
    };
    let dx = field(rng);
    let dy = field(rng);
    Array2::from_shape_fn((h, w), |(y, x)| {
        sample_bilinear(
            img,
            x as f64 + dx[[y, x]] as f64,
            y as f64 + dy[[y, x]] as f64,
            1.0,
        )
    })
}

fn background_texture(h: usize, w: usize, rng: &mut impl Rng) -> Array2<f32> {
    let cell = (h / 3).max(2);
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid = Array2::from_shape_fn((gh, gw), |_| rng.random::<f32>());
    Array2::from_shape_fn((h, w), |(y, x)| {
        sample_bilinear(&grid, x as f64 / cell as f64, y as f64 / cell as f64, 0.0)
    })
}

/// Applies one random draw of `cfg` to `img`. Transcript, domain and writer
/// are preserved; the result is clamped to `[0, 1]` and keeps the input height.
pub fn augment(img: &WordImage, cfg: &AugmentConfig, rng_seed: u64) -> WordImage {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let g = &cfg.geometric;
    let p = &cfg.pixel;
    let shear = g.shear_range_deg.sample(&mut rng);
    let rot = g.rotation_range_deg.sample(&mut rng);
    let scale = g.scale_range.sample(&mut rng);
    let blur = p.blur_sigma_range.sample(&mut rng);
    let gamma = p.gamma_range.sample(&mut rng);
    let bright = p.brightness_range.sample(&mut rng);
    let contrast = p.contrast_range.sample(&mut rng);
    let noise_std = p.noise_std_range.sample(&mut rng);
    let texture = cfg.background.texture_strength_range.sample(&mut rng);

    let mut px = img.pixels.clone();
    if shear != 0.0 || rot != 0.0 || scale != 1.0 {
        px = affine_warp(&px, shear, rot, scale);
    }
    if g.elastic.alpha > 0.0 && g.elastic.sigma > 0.0 {
        px = elastic_warp(&px, g.elastic.alpha, g.elastic.sigma, &mut rng);
    }
    if blur > 0.0 {
        px = gaussian_blur(&px, blur);
    }
    if gamma != 1.0 {
        let gm = gamma as f32;
        px.mapv_inplace(|v| v.clamp(0.0, 1.0).powf(gm));
    }
    if bright != 0.0 || contrast != 1.0 {
        let (b, c) = (bright as f32, contrast as f32);
        px.mapv_inplace(|v| (v - 0.5) * c + 0.5 + b);
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0f32, noise_std as f32).expect("finite std");
        px.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    if cfg.background.enabled && texture > 0.0 {
        let (h, w) = px.dim();
        let tex = background_texture(h, w, &mut rng);
        let s = texture as f32;
        px.zip_mut_with(&tex, |v, &t| *v *= 1.0 - s * t);
    }
    px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    WordImage {
        pixels: px,
        transcript: img.transcript.clone(),
        domain: img.domain,
        writer_id: img.writer_id.clone(),
    }
}

/// Renders and augments image `index` of a stream with the given seed.
pub fn generate_one(
    corpus: &Corpus,
    fonts: &FontSet,
    cfg: &AugmentConfig,
    canonical_height: usize,
    rng_seed: u64,
    index: u64,
) -> Result<WordImage> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(index);
    let word = &corpus.words[rng.random_range(0..corpus.len())];
    let mut last_err = None;
    for _ in 0..=MAX_FONT_RETRIES {
        let font = &fonts.entries()[rng.random_range(0..fonts.len())];
        let render_seed = rng.random::<u64>();
        let aug_seed = rng.random::<u64>();
        match render_word(word, font, canonical_height, render_seed) {
            Ok(img) => return Ok(augment(&img, cfg, aug_seed)),
            Err(e @ Error::MissingGlyph { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// Fonts tried per word before a missing glyph becomes an error.
pub const MAX_FONT_RETRIES: usize = 10;

/// Lazily yields `n` labeled source-domain images.
pub fn generate_stream<'a>(
    corpus: &'a Corpus,
    fonts: &'a FontSet,
    cfg: &'a AugmentConfig,
    canonical_height: usize,
    n: usize,
    rng_seed: u64,
) -> Result<impl Iterator<Item = Result<WordImage>> + 'a> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    cfg.validate()?;
    Ok((0..n as u64)
        .map(move |i| generate_one(corpus, fonts, cfg, canonical_height, rng_seed, i)))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_font() -> Option<FontEntry> {
        crate::fonts::system_font_files()
            .into_iter()
            .find(|p| p.file_name().is_some_and(|n| n == "DejaVuSans.ttf"))
            .and_then(|p| FontEntry::from_bytes("dejavu", fs::read(p).ok()?).ok())
    }

    fn blank(h: usize, w: usize) -> WordImage {
        let px = Array2::from_shape_fn((h, w), |(y, x)| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        WordImage::source(px, "ab")
    }

    #[test]
    fn identity_augment_is_exact() {
        let img = blank(16, 40);
        let out = augment(&img, &AugmentConfig::identity(), 9);
        assert_eq!(out, img);
    }

    #[test]
    fn augment_deterministic_and_clamped() {
        let img = blank(16, 40);
        for cfg in [AugmentConfig::light(), AugmentConfig::heavy()] {
            let a = augment(&img, &cfg, 3);
            let b = augment(&img, &cfg, 3);
            assert_eq!(a, b);
            assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(a.height(), 16);
            assert_eq!(a.transcript(), Some("ab"));
        }
    }

    #[test]
    fn fixed_noise_changes_pixels_within_bound() {
        let img = WordImage::source(Array2::from_elem((16, 30), 0.5), "x");
        let mut cfg = AugmentConfig::identity();
        cfg.pixel.noise_std_range = Range(0.05, 0.05);
        let out = augment(&img, &cfg, 1);
        assert_ne!(out.pixels, img.pixels);
        let max_dev = out
            .pixels
            .iter()
            .zip(img.pixels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        // a 480-sample draw from N(0, 0.05) stays far inside 8 sigma
        assert!(max_dev > 0.0 && max_dev < 0.4, "{max_dev}");
        assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn validate_rejects_inverted_range() {
        let mut cfg = AugmentConfig::light();
        cfg.geometric.scale_range = Range(1.2, 0.8);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn render_is_deterministic_with_dark_ink() {
        let Some(font) = test_font() else { return };
        let a = render_word("vous", &font, 64, 7).unwrap();
        let b = render_word("vous", &font, 64, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.height(), 64);
        assert_eq!(a.domain, Domain::Source);
        assert_eq!(a.transcript(), Some("vous"));
        let mean: f32 = a.pixels.mean().unwrap();
        let min = a.pixels.iter().copied().fold(1.0f32, f32::min);
        assert!(mean > 0.6, "background should dominate: {mean}");
        assert!(min < 0.1, "ink should be dark: {min}");
        let longer = render_word("vousvous", &font, 64, 7).unwrap();
        assert!(longer.width() > a.width() + a.width() / 2);
    }

    #[test]
    fn render_rejects_empty_and_missing_glyph() {
        let Some(font) = test_font() else { return };
        assert!(matches!(
            render_word("", &font, 64, 7),
            Err(Error::InvalidArgument(_))
        ));
        match render_word("a\u{E000}", &font, 64, 7) {
            Err(Error::MissingGlyph { ch, .. }) => assert_eq!(ch, '\u{E000}'),
            other => panic!("expected MissingGlyph, got {other:?}"),
        }
    }
}
