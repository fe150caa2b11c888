//! Charsets, transcript encoding, dataset manifests, preprocessing and
//! mixed-domain batching.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mix_seed;
use crate::synthgen::{resize_to_height, Corpus, Domain, LabelAudit, WordImage};

pub const CHARSET_FORMAT_VERSION: u32 = 1;

/// Default cap on transcript length, which bounds greedy decoding.
pub const DEFAULT_MAX_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub end: usize,
    pub pad: usize,
    pub unk: usize,
}

/// Character inventory. Symbols take ids `0..n` in codepoint order, followed
/// by END, PAD and UNK.
#[derive(Debug)]
pub struct Charset {
    symbols: Vec<char>,
    specials: Specials,
    unk_count: AtomicUsize,
}

impl Clone for Charset {
    fn clone(&self) -> Self {
        Self {
            symbols: self.symbols.clone(),
            specials: self.specials,
            unk_count: AtomicUsize::new(self.unk_count()),
        }
    }
}

impl PartialEq for Charset {
    fn eq(&self, other: &Self) -> bool {
        self.symbols == other.symbols && self.specials == other.specials
    }
}

#[derive(Serialize, Deserialize)]
struct CharsetFile {
    format_version: u32,
    symbols: Vec<String>,
    specials: Specials,
}

/// Encoded transcript ending in exactly one END.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    /// Checks the END/PAD invariants against `cs`.
    pub fn new(ids: Vec<usize>, cs: &Charset) -> Result<Self> {
        let sp = cs.specials();
        match ids.iter().position(|&i| i == sp.end) {
            Some(p) if p + 1 == ids.len() => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "token sequence must end with its only END".into(),
                ))
            }
        }
        if ids.iter().any(|&i| i == sp.pad || i >= cs.len()) {
            return Err(Error::InvalidArgument("PAD or out-of-range id in token sequence".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Never true; kept for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Charset {
    pub fn from_symbols(symbols: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = symbols.into_iter().collect();
        let symbols: Vec<char> = set.into_iter().collect();
        let n = symbols.len();
        Self {
            symbols,
            specials: Specials {
                end: n,
                pad: n + 1,
                unk: n + 2,
            },
            unk_count: AtomicUsize::new(0),
        }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn end(&self) -> usize {
        self.specials.end
    }

    pub fn pad(&self) -> usize {
        self.specials.pad
    }

    pub fn unk(&self) -> usize {
        self.specials.unk
    }

    /// Total vocabulary size including specials.
    pub fn len(&self) -> usize {
        self.symbols.len() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, ch: char) -> Option<usize> {
        self.symbols.binary_search(&ch).ok()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    pub fn contains(&self, ch: char) -> bool {
        self.id_of(ch).is_some()
    }

    /// Number of characters mapped to UNK since creation.
    pub fn unk_count(&self) -> usize {
        self.unk_count.load(Ordering::Relaxed)
    }

    /// Character ids followed by END; unknown characters become UNK and are counted.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        if text.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty transcript".into()));
        }
        let mut ids: Vec<usize> = text
            .chars()
            .map(|ch| {
                self.id_of(ch).unwrap_or_else(|| {
                    self.unk_count.fetch_add(1, Ordering::Relaxed);
                    self.unk()
                })
            })
            .collect();
        ids.push(self.end());
        Ok(TokenSeq { ids })
    }

    /// Characters before the first END; special tokens are dropped.
    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != self.end())
            .filter_map(|&i| self.char_of(i))
            .collect()
    }

    pub fn decode(&self, seq: &TokenSeq) -> String {
        self.decode_ids(seq.ids())
    }

    fn to_file(&self) -> CharsetFile {
        CharsetFile {
            format_version: CHARSET_FORMAT_VERSION,
            symbols: self.symbols.iter().map(|c| c.to_string()).collect(),
            specials: self.specials,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("charset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CharsetFile = serde_json::from_str(text)?;
        if file.format_version != CHARSET_FORMAT_VERSION {
            return Err(Error::IncompatibleCharset(format!(
                "unsupported charset format version {}",
                file.format_version
            )));
        }
        let mut symbols = Vec::with_capacity(file.symbols.len());
        for s in &file.symbols {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => symbols.push(c),
                _ => return Err(Error::IncompatibleCharset(format!("bad symbol {s:?}"))),
            }
        }
        let cs = Self::from_symbols(symbols.iter().copied());
        if cs.symbols != symbols || cs.specials != file.specials {
            return Err(Error::IncompatibleCharset(
                "symbols must be unique and sorted with specials following them".into(),
            ));
        }
        Ok(cs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the JSON form; stored in checkpoints.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Charset covering every character of `corpora` plus `extra_symbols`.
pub fn build_charset(corpora: &[&Corpus], extra_symbols: &[char]) -> Result<Charset> {
    if corpora.is_empty() {
        return Err(Error::InvalidArgument("at least one corpus is required".into()));
    }
    let chars = corpora
        .iter()
        .flat_map(|c| c.words.iter())
        .flat_map(|w| w.chars())
        .chain(extra_symbols.iter().copied());
    Ok(Charset::from_symbols(chars))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub writer_id: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Domain>,
}

/// JSON-lines dataset index. Relative image paths resolve against the
/// manifest's own directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path)?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
                Error::InvalidArgument(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            records.push(rec);
        }
        Ok(Self {
            records,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    pub fn resolve(&self, rec: &ManifestRecord) -> PathBuf {
        if rec.image_path.is_absolute() {
            rec.image_path.clone()
        } else {
            self.base_dir.join(&rec.image_path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Decodes every record of `split`. Records without a domain get `default_domain`.
    pub fn load_images(
        &self,
        split: Split,
        default_domain: Domain,
        canonical_height: usize,
    ) -> Result<Vec<WordImage>> {
        self.split(split)
            .map(|r| {
                let pixels = preprocess_file(self.resolve(r), canonical_height)?;
                WordImage::new(
                    pixels,
                    r.domain.unwrap_or(default_domain),
                    r.transcript.clone(),
                    r.writer_id.clone(),
                )
            })
            .collect()
    }
}

/// Grayscale in `[0, 1]`, resized to `canonical_height` rows with the aspect
/// ratio preserved.
pub fn preprocess(raw: &image::DynamicImage, canonical_height: usize) -> Result<Array2<f32>> {
    if canonical_height == 0 {
        return Err(Error::InvalidArgument("canonical height must be positive".into()));
    }
    let gray = raw.to_luma8();
    let (w, h) = gray.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Decode("image has no pixels".into()));
    }
    let px = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        gray.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    });
    Ok(resize_to_height(&px, canonical_height))
}

pub fn preprocess_file(path: impl AsRef<Path>, canonical_height: usize) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    preprocess(&img, canonical_height)
}

/// Writes pixels in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_png(pixels: &Array2<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dims");
    img.save(path.as_ref())?;
    Ok(())
}

/// Position of one item inside the per-domain pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ItemRef {
    pub domain: Domain,
    pub index: usize,
}

fn fill_indices(n: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // concatenated shuffled passes, so every item appears before any repeats
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out.extend(perm.into_iter().take(count - out.len()));
    }
    out
}

/// Batches of one epoch. With both pools non-empty each domain contributes
/// `max(n_source, n_target)` items, the smaller pool being oversampled; the
/// merged list is shuffled from `(rng_seed, epoch)`, so the within-batch mix
/// is random. With `n_target == 0` the epoch is a shuffled pass over source.
pub fn plan_epoch(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    rng_seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<ItemRef>>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument("batch size must be at least 2".into()));
    }
    if n_source == 0 {
        return Err(Error::ExhaustedStream("source"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, epoch));
    let per_domain = n_source.max(n_target);
    let mut items: Vec<ItemRef> = fill_indices(n_source, per_domain, &mut rng)
        .into_iter()
        .map(|index| ItemRef {
            domain: Domain::Source,
            index,
        })
        .collect();
    if n_target > 0 {
        items.extend(fill_indices(n_target, per_domain, &mut rng).into_iter().map(|index| {
            ItemRef {
                domain: Domain::Target,
                index,
            }
        }));
    }
    items.shuffle(&mut rng);
    Ok(items.chunks(batch_size).map(<[ItemRef]>::to_vec).collect())
}

/// Balanced first-epoch batches over a source and a target pool.
pub fn make_batches(
    source: &[WordImage],
    target: &[WordImage],
    batch_size: usize,
    rng_seed: u64,
) -> Result<Vec<Vec<ItemRef>>> {
    if target.is_empty() {
        return Err(Error::ExhaustedStream("target"));
    }
    plan_epoch(source.len(), target.len(), batch_size, rng_seed, 0)
}

/// Padded token targets. Rows of unlabeled items have length 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBlock {
    /// `[batch, max_len]`, padded with PAD.
    pub ids: Array2<usize>,
    pub lengths: Vec<usize>,
}

/// A collated mini-batch.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    /// `[batch, 1, height, max_width]` ink intensity (`1 - pixel`), so the
    /// background-valued padding is zero.
    pub ink: Array4<f32>,
    pub widths: Vec<usize>,
    pub domains: Vec<Domain>,
    /// Present when at least one item is labeled for recognition.
    pub targets: Option<TokenBlock>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }

    /// Whether item `i` takes part in the recognition loss.
    pub fn is_labeled(&self, i: usize) -> bool {
        self.targets.as_ref().is_some_and(|t| t.lengths[i] > 0)
    }
}

/// Stacks images into a padded block. Transcripts are read through
/// `audit` and only for items whose domain satisfies `labeled`.
pub fn collate(
    items: &[&WordImage],
    charset: &Charset,
    audit: &LabelAudit,
    labeled: impl Fn(Domain) -> bool,
) -> Result<DomainBatch> {
    let Some(first) = items.first() else {
        return Err(Error::InvalidArgument("cannot collate an empty batch".into()));
    };
    let height = first.height();
    if let Some(bad) = items.iter().find(|i| i.height() != height) {
        return Err(Error::DimensionMismatch {
            expected: height,
            got: bad.height(),
        });
    }
    let widths: Vec<usize> = items.iter().map(|i| i.width()).collect();
    let max_w = *widths.iter().max().unwrap();
    let mut ink = Array4::zeros((items.len(), 1, height, max_w));
    for (b, img) in items.iter().enumerate() {
        ink.slice_mut(ndarray::s![b, 0, .., ..img.width()])
            .assign(&img.pixels.mapv(|p| 1.0 - p));
    }
    let mut seqs: Vec<Option<TokenSeq>> = Vec::with_capacity(items.len());
    for img in items {
        let seq = if labeled(img.domain) {
            match img.training_label(audit) {
                Some(t) if !t.is_empty() => Some(charset.encode(t)?),
                _ => None,
            }
        } else {
            None
        };
        seqs.push(seq);
    }
    let targets = if seqs.iter().any(Option::is_some) {
        let t = seqs.iter().flatten().map(TokenSeq::len).max().unwrap();
        let mut ids = Array2::from_elem((items.len(), t), charset.pad());
        let mut lengths = vec![0; items.len()];
        for (b, s) in seqs.iter().enumerate() {
            if let Some(s) = s {
                lengths[b] = s.len();
                for (k, &id) in s.ids().iter().enumerate() {
                    ids[[b, k]] = id;
                }
            }
        }
        Some(TokenBlock { ids, lengths })
    } else {
        None
    };
    Ok(DomainBatch {
        ink,
        widths,
        domains: items.iter().map(|i| i.domain).collect(),
        targets,
    })
}
